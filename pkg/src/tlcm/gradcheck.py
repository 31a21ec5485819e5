"""Finite-difference verification of every hand-written gradient in the pipeline.

Each check freezes everything that is detached in training (sampled states,
stop-gradient targets, score differences, discriminator weights) and compares
the analytic parameter gradient with central differences.
"""

from . import config as C
from .diffusion import milestones
from .distill import cm_backward, cm_forward, ilcd_batch, ilcd_loss, mlcd_batch, mlcd_loss
from .enhance import (Discriminator, ScorePair, dfdm_grad, dfdm_surrogate, gan_losses,
                      mps_batch, mps_objective, reward_for, _noisy_student_states, _t_prime)
from .nets import finite_diff_check
from .pipeline import make_student, new_teacher
from .rng import rng
from .teacher import noise_loss_and_grad, teacher_batch

TOLERANCE = 1e-4


def _perturbed(model, seed, scale=0.05):
    g = rng(seed, "gradcheck-perturb")
    return model.with_params(model.params + scale * g.standard_normal(model.params.size))


def loss_closures(cfg, batch=8):
    """Map of loss name -> ``(loss_and_grad(params), params)``."""
    cfg = C.merge(cfg, {"distill": {"batch": batch}, "teacher": {"batch": batch},
                        "enhance": {"batch": batch, "reward_batch": batch}})
    seed = cfg["seed"]
    schedule = C.schedule_of(cfg)
    ds = C.dataset_of(cfg)
    K = ds.K
    teacher = new_teacher(cfg, schedule)
    student = make_student(cfg, teacher, _perturbed(teacher, seed).params)
    frozen = student.copy()
    d = C.distill_config_of(cfg)
    e = C.enhance_config_of(cfg)
    out = {}

    x0, t, eps, labels = teacher_batch(ds, schedule, C.teacher_config_of(cfg), 0, seed)
    out["teacher"] = (lambda p: noise_loss_and_grad(teacher.with_params(p), x0, t, eps, labels,
                                                    schedule), teacher.params)

    plan1 = milestones(d.M, schedule.T, d.skip)
    b1 = mlcd_batch(schedule, teacher, plan1, d, K, seed, 0)
    out["mlcd"] = (lambda p: mlcd_loss(student.with_params(p), b1, plan1, d,
                                       target_model=frozen), student.params)
    for kind in ("feature",):
        dd = C.distill_config_of(C.merge(cfg, {"distill": {"distance": kind}}))
        out[f"mlcd[{kind}]"] = (lambda p, dd=dd: mlcd_loss(student.with_params(p), b1, plan1, dd,
                                                          target_model=frozen), student.params)

    plan2 = milestones(d.M, schedule.T, schedule.T // d.M)
    b2 = ilcd_batch(student, teacher, plan2, d, seed, 0)
    out["ilcd"] = (lambda p: ilcd_loss(student.with_params(p), b2, d, target_model=frozen),
                   student.params)

    reward = reward_for(ds, e.reward_radius, e.reward_scale)
    b3 = mps_batch(student, e, K, seed, 0)
    out["mps"] = (lambda p: mps_objective(student.with_params(p), reward, b3, e.s0)[:2],
                  student.params)

    g = rng(seed, "gradcheck-dm")
    c, z0, z_t, tt = _noisy_student_states(student, e, g, batch, K)
    xs, cache = cm_forward(student, z_t, tt, c)
    pair = ScorePair(teacher.copy(), _perturbed(teacher, seed + 1))
    tp = _t_prime(schedule.T, g)
    _, _, diff = dfdm_grad(pair, student, tp, xs, cache, c, g.standard_normal(xs.shape), e.w)
    out["dfdm"] = (lambda p: dfdm_surrogate(student.with_params(p), z_t, tt, c, diff),
                   student.params)

    D = Discriminator.create(2, n_classes=K, T=schedule.T, seed=seed)
    gseed = seed + 17

    def d_closure(p):
        r = gan_losses(Discriminator(D.net.with_params(p)), z0, xs, tp, c, gseed, schedule)
        return r["d_loss"], r["grad_d"]

    def g_closure(p):
        sp = student.with_params(p)
        fake, fc = cm_forward(sp, z_t, tt, c)
        r = gan_losses(D, z0, fake, tp, c, gseed, schedule)
        return r["g_loss"], cm_backward(sp, fc, r["grad_fake"])

    out["gan_d"] = (d_closure, D.net.params)
    out["gan_g"] = (g_closure, student.params)
    return out


def run_gradcheck(cfg, probes=16, batch=8):
    """``{name: GradReport}`` for every loss."""
    reports = {}
    for name, (fn, params) in loss_closures(cfg, batch).items():
        reports[name] = finite_diff_check(fn, params, probes=probes, seed=cfg["seed"])
    return reports
