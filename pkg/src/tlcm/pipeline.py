"""Glue between a config tree and the training / evaluation modules."""

import logging
import time

from . import config as C
from .distill import ConsistencyModel, train_ilcd, train_mlcd
from .enhance import EnhanceState, enhance_loop, reward_for
from .evaluation import (class_labels, evaluate_samples, sweep_steps, teacher_samples)
from .nets import make_denoiser
from .teacher import train_teacher

log = logging.getLogger(__name__)


def new_teacher(cfg, schedule=None):
    schedule = schedule or C.schedule_of(cfg)
    m = cfg["model"]
    return make_denoiser(schedule, 2, tuple(m["hidden"]), m["time_dim"], cfg["data"]["K"],
                         m["activation"], seed=cfg["seed"], skip=m["eps_skip"])


def run_teacher(cfg, trace=None):
    schedule = C.schedule_of(cfg)
    model = new_teacher(cfg, schedule)
    return train_teacher(C.dataset_of(cfg), schedule, C.teacher_config_of(cfg), model=model,
                         trace=trace)


def make_student(cfg, teacher, params=None):
    """Consistency student wrapping a copy of the teacher (or the given params)."""
    d = C.distill_config_of(cfg)
    net = teacher.copy() if params is None else teacher.with_params(params)
    return ConsistencyModel(net, teacher.schedule, d.sigma_data, d.kappa, d.parameterization)


def run_distill(cfg, stage, teacher, student=None, trace=None):
    d = C.distill_config_of(cfg)
    student = student or make_student(cfg, teacher)
    if stage == "mlcd":
        return train_mlcd(student, teacher, d, cfg["seed"], trace)
    if stage == "ilcd":
        return train_ilcd(student, teacher, d, cfg["seed"], trace)
    raise ValueError(f"unknown distillation stage {stage!r}")


def reward_of(cfg):
    e = cfg["enhance"]
    return reward_for(C.dataset_of(cfg), e["reward_radius"], e["reward_scale"])


def run_enhance(cfg, student, teacher, stages=None, state=None):
    e = C.enhance_config_of(cfg)
    stages = tuple(stages if stages is not None else e.stages)
    state = state or EnhanceState()
    enhance_loop(student, teacher, stages, e, cfg["seed"], reward=reward_of(cfg),
                 n_classes=cfg["data"]["K"], state=state)
    return student, state


def run_eval(cfg, student, teacher=None):
    """Metric reports: teacher DDIM baseline (if given) and the student step sweep,
    pooled and, with ``eval.per_class``, per class."""
    ev = cfg["eval"]
    ds = C.dataset_of(cfg)
    reward = reward_of(cfg)
    seed = cfg["seed"]
    policies = ["uniform"] + (list(range(ds.K)) if ev["per_class"] else [])
    reports = []
    for pol in policies:
        suffix = "" if pol == "uniform" else f"/c{pol}"
        if teacher is not None:
            labels = class_labels(pol, ev["n"], ds.K)
            t0 = time.perf_counter()
            x = teacher_samples(teacher, teacher.schedule, ev["n"], ev["teacher_steps"], labels,
                                cfg["distill"]["w"], seed)
            ms = round((time.perf_counter() - t0) * 1e3) if ev["wall_clock"] else 0
            reports.append(evaluate_samples("teacher" + suffix, ev["teacher_steps"], x, labels,
                                            ds, seed, ev["projections"], reward, ms))
        reports += sweep_steps(student, ev["steps"], ev["n"], pol, ds, seed, ev["projections"],
                               reward, sampler="tlcm" + suffix, wall_clock=ev["wall_clock"])
    return reports


def pooled_w2(cfg, student, steps, n=None, seed=None):
    """Pooled sliced W2 of the ``steps``-step student sampler (no per-class rows)."""
    ev = cfg["eval"]
    rep = sweep_steps(student, [steps], n or ev["n"], "uniform", C.dataset_of(cfg),
                      cfg["seed"] if seed is None else seed, ev["projections"], None,
                      wall_clock=False)[0]
    return rep.w2


def teacher_reference(cfg, teacher, policy="uniform", n=None):
    ev = cfg["eval"]
    ds = C.dataset_of(cfg)
    n = n or ev["n"]
    labels = class_labels(policy, n, ds.K)
    x = teacher_samples(teacher, teacher.schedule, n, ev["teacher_steps"], labels,
                        cfg["distill"]["w"], cfg["seed"])
    return evaluate_samples("teacher", ev["teacher_steps"], x, labels, ds, cfg["seed"],
                            ev["projections"])
