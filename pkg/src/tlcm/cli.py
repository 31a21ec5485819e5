"""Command line entry point: ``tlcm train-teacher|distill|enhance|sample|eval|gradcheck``.

Every subcommand writes its output plus ``<out>.manifest.json``; training
subcommands also write a JSONL loss trace to ``<out>.trace.jsonl``. Failures
print a single ``error: <kind>: <message>`` line to stderr and exit nonzero.
"""

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

from . import checkpoint as ckp
from . import config as C
from .distill import sample_student
from .evaluation import class_labels, write_reports
from .gradcheck import TOLERANCE, run_gradcheck
from .pipeline import make_student, run_distill, run_enhance, run_eval, run_teacher
from .teacher import TrainingDiverged

log = logging.getLogger("tlcm")

EXIT_FAIL = 1
EXIT_USAGE = 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------------------
# helpers


def _config(args, base=None):
    """Defaults (or a checkpoint's snapshot) < ``--config`` file < ``--set`` < ``--seed``."""
    cfg = C.default_config() if base is None else C.merge(C.default_config(), base)
    if args.config:
        cfg = C.merge(cfg, C.read_config_file(args.config))
    for item in args.set or ():
        cfg = C.merge(cfg, C.parse_override(item))
    if args.seed is not None:
        cfg["seed"] = int(args.seed)
    return cfg


def _manifest(out, cfg, stage, t0, extra=None):
    data = {"config_hash": C.config_hash(cfg), "seed": cfg["seed"], "stage": stage,
            "wall_time": round(time.perf_counter() - t0, 3)}
    data.update(extra or {})
    Path(f"{out}.manifest.json").write_text(json.dumps(data, sort_keys=True) + "\n")


def _write_trace(out, trace):
    with open(f"{out}.trace.jsonl", "w") as fh:
        for rec in trace:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def _save(out, stage, cfg, schedule, nets):
    arrays = {}
    for name, net in nets.items():
        ckp.pack_net(arrays, name, net)
    ckp.save(ckp.Checkpoint(stage, schedule, cfg, arrays), out)


def _load_models(path, args, need_teacher=True):
    """(cfg, teacher, student) from a checkpoint; a teacher-only file yields an
    untrained student initialized from the teacher."""
    ck = ckp.load(path)
    cfg = _config(args, ck.config)
    teacher = ckp.unpack_net(ck, "teacher") if ckp.has_net(ck, "teacher") else None
    if teacher is None and need_teacher:
        raise ckp.CheckpointError(f"{path} holds no teacher network")
    if ckp.has_net(ck, "student"):
        student = make_student(cfg, ckp.unpack_net(ck, "student"))
    elif teacher is not None:
        student = make_student(cfg, teacher)
    else:
        raise ckp.CheckpointError(f"{path} holds no network")
    return cfg, teacher, student


# ---------------------------------------------------------------------------
# subcommands


def cmd_train_teacher(args):
    t0 = time.perf_counter()
    cfg = _config(args)
    trace = []
    teacher = run_teacher(cfg, trace)
    _save(args.out, "teacher", cfg, teacher.schedule, {"teacher": teacher})
    _write_trace(args.out, trace)
    _manifest(args.out, cfg, "teacher", t0)
    return 0


def cmd_distill(args):
    t0 = time.perf_counter()
    cfg, teacher, _ = _load_models(args.teacher, args)
    student = None
    if args.student:
        _, _, student = _load_models(args.student, args, need_teacher=False)
    trace = []
    student = run_distill(cfg, args.stage, teacher, student, trace)
    _save(args.out, args.stage, cfg, teacher.schedule, {"teacher": teacher, "student": student.net})
    _write_trace(args.out, trace)
    _manifest(args.out, cfg, args.stage, t0)
    return 0


def cmd_enhance(args):
    t0 = time.perf_counter()
    cfg, _, student = _load_models(args.student, args, need_teacher=False)
    _, teacher, _ = _load_models(args.teacher, args)
    stages = args.stages.split(",") if args.stages else None
    student, state = run_enhance(cfg, student, teacher, stages)
    _save(args.out, "enhanced", cfg, teacher.schedule, {"teacher": teacher, "student": student.net})
    _write_trace(args.out, [dict(stage=k, **rec) for k, recs in state.traces.items() for rec in recs])
    _manifest(args.out, cfg, "enhanced", t0)
    return 0


def cmd_sample(args):
    t0 = time.perf_counter()
    cfg, _, student = _load_models(args.student, args, need_teacher=False)
    K = cfg["data"]["K"]
    policy = "uniform" if args.cls == "uniform" else int(args.cls)
    if policy != "uniform" and not 0 <= policy < K:
        raise ValueError(f"class {policy} outside [0, {K})")
    labels = class_labels(policy, args.n, K)
    x = sample_student(student, args.n, args.steps, labels, cfg["seed"])
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for row in x:
            w.writerow([repr(float(v)) for v in row])
    _manifest(args.out, cfg, "sample", t0, {"steps": args.steps, "n": args.n})
    return 0


def cmd_eval(args):
    t0 = time.perf_counter()
    cfg, teacher, student = _load_models(args.student, args, need_teacher=False)
    reports = run_eval(cfg, student, teacher)
    jsonl = Path(args.out).with_suffix(".jsonl")
    write_reports(reports, args.out, jsonl)
    _manifest(args.out, cfg, "eval", t0)
    return 0


def cmd_gradcheck(args):
    t0 = time.perf_counter()
    cfg = _config(args)
    reports = run_gradcheck(cfg, probes=args.probes)
    worst = 0.0
    for name, rep in reports.items():
        worst = max(worst, rep.max_rel_err)
        print(f"{name} max_rel_err={rep.max_rel_err:.3e}")
    ok = worst < TOLERANCE
    print(f"max_rel_err={worst:.3e} {'pass' if ok else 'FAIL'}")
    if args.out:
        _manifest(args.out, cfg, "gradcheck", t0, {"max_rel_err": worst})
    if not ok:
        raise ValueError(f"max_rel_err {worst:.3e} >= {TOLERANCE:g}")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser():
    p = _Parser(prog="tlcm", description="Two-stage latent consistency distillation on 2-D mixtures.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", required=True, parser_class=_Parser)

    def add(name, fn, out_required=True, help=None):
        sp = sub.add_parser(name, help=help)
        sp.add_argument("--config", help="YAML config file")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override one config key, e.g. distill.M=4")
        sp.add_argument("--out", required=out_required)
        sp.set_defaults(fn=fn)
        return sp

    add("train-teacher", cmd_train_teacher, help="train the guided noise-prediction teacher")
    sp = add("distill", cmd_distill, help="run one distillation stage")
    sp.add_argument("--stage", choices=("mlcd", "ilcd"), required=True)
    sp.add_argument("--teacher", required=True)
    sp.add_argument("--student")
    sp = add("enhance", cmd_enhance, help="reward / distribution matching / adversarial finetuning")
    sp.add_argument("--student", required=True)
    sp.add_argument("--teacher", required=True)
    sp.add_argument("--stages", help="comma list from reward,dm,gan")
    sp = add("sample", cmd_sample, help="write student samples as CSV")
    sp.add_argument("--student", required=True)
    sp.add_argument("--steps", type=int, default=4)
    sp.add_argument("--n", type=int, default=1024)
    sp.add_argument("--class", dest="cls", default="uniform")
    sp = add("eval", cmd_eval, help="metric sweep to CSV + JSONL")
    sp.add_argument("--student", required=True)
    sp = add("gradcheck", cmd_gradcheck, out_required=False, help="finite-difference gradient suite")
    sp.add_argument("--probes", type=int, default=16)
    return p


def _kind(exc):
    if isinstance(exc, UsageError):
        return "usage"
    if isinstance(exc, C.ConfigError):
        return "config"
    if isinstance(exc, ckp.CheckpointError):
        return "checkpoint"
    if isinstance(exc, TrainingDiverged):
        return "diverged"
    if isinstance(exc, (OSError, FileNotFoundError)):
        return "io"
    if isinstance(exc, FloatingPointError):
        return "numeric"
    return "validation"


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.fn(args)
    except (UsageError, C.ConfigError, ckp.CheckpointError, TrainingDiverged, OSError,
            ValueError, FloatingPointError) as exc:
        msg = " ".join(str(exc).split())
        print(f"error: {_kind(exc)}: {msg}", file=sys.stderr)
        return EXIT_USAGE if isinstance(exc, UsageError) else EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
