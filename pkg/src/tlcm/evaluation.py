"""Distributional metrics against known ground truth and step-count sweeps."""

import csv
import json
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import _kernels
from .distill import sample_student
from .diffusion import ddim_multi
from .rng import rng
from .teacher import sample_dataset

CSV_COLUMNS = ["sampler", "steps", "n", "w2", "energy", "mean_reward", "wall_ms", "seed"]


def sliced_w2(a, b, projections=128, seed=0):
    """Mean over random unit directions of the exact 1-D W2 of the projections."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise ValueError("sliced_w2 needs non-empty point sets")
    if a.ndim == 1:
        a, b = a[:, None], b[:, None]
    if projections < 1:
        raise ValueError("projections must be >= 1")
    dirs = rng(seed, "sliced-w2").standard_normal((projections, a.shape[1]))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    pa = np.sort(a @ dirs.T, axis=0)
    pb = np.sort(b @ dirs.T, axis=0)
    total = 0.0
    for k in range(projections):
        total += np.sqrt(_kernels.w2_sorted(pa[:, k], pb[:, k]))
    return total / projections


def energy_distance(a, b):
    """``2 E|A-B| - E|A-A'| - E|B-B'|`` with U-statistics for the within terms."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim == 1:
        a, b = a[:, None], b[:, None]
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise ValueError("energy_distance needs non-empty point sets")
    return (2.0 * _kernels.cross_mean_dist(a, b)
            - _kernels.self_mean_dist(a) - _kernels.self_mean_dist(b))


@dataclass
class MetricReport:
    sampler: str
    steps: int
    n: int
    w2: float
    energy: float
    mean_reward: float
    wall_ms: int
    seed: int


def class_labels(policy, n, n_classes):
    """Labels for an evaluation batch: ``"uniform"`` cycles through classes, an int fixes one."""
    if policy == "uniform":
        return np.arange(n) % n_classes
    return np.full(n, int(policy), dtype=np.int64)


def ground_truth(ds, labels, seed):
    return sample_dataset(ds, labels.shape[0], seed=seed, labels=labels, counter=10**6)[0]


def evaluate_samples(name, steps, samples, labels, ds, seed, projections=128, reward=None,
                     wall_ms=0):
    truth = ground_truth(ds, labels, seed)
    w2 = sliced_w2(samples, truth, projections, seed)
    en = max(energy_distance(samples, truth), 0.0)
    mr = float(np.mean(reward.score(samples, labels))) if reward is not None else 0.0
    return MetricReport(name, int(steps), int(samples.shape[0]), float(w2), float(en), mr,
                        int(wall_ms), int(seed))


def sweep_steps(student, steps_list, n, c_policy, ds, seed, projections=128, reward=None,
                sampler="tlcm", wall_clock=True):
    """One report per step count of the student's self-sampling loop."""
    if not steps_list:
        raise ValueError("steps_list must be non-empty")
    labels = class_labels(c_policy, n, ds.K)
    reports = []
    for k in steps_list:
        t0 = time.perf_counter()
        x = sample_student(student, n, int(k), labels, seed)
        ms = round((time.perf_counter() - t0) * 1e3) if wall_clock else 0
        reports.append(evaluate_samples(sampler, k, x, labels, ds, seed, projections, reward, ms))
    return reports


def teacher_samples(teacher, schedule, n, steps, labels, w, seed):
    z = rng(seed, "teacher-sample").standard_normal((n, teacher.dim))
    return ddim_multi(schedule, teacher, z, schedule.T, 0, steps, labels, w)


def write_reports(reports, csv_path, jsonl_path=None, append=False):
    """Write reports as CSV (fixed column order) and mirror them as JSONL."""
    csv_path = Path(csv_path)
    mode = "a" if append and csv_path.exists() else "w"
    with open(csv_path, mode, newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if mode == "w":
            w.writerow(CSV_COLUMNS)
        for r in reports:
            d = asdict(r)
            w.writerow([d["sampler"], d["steps"], d["n"], repr(d["w2"]), repr(d["energy"]),
                        repr(d["mean_reward"]), d["wall_ms"], d["seed"]])
    jsonl_path = Path(jsonl_path) if jsonl_path else csv_path.with_suffix(".jsonl")
    with open(jsonl_path, mode) as fh:
        for r in reports:
            fh.write(json.dumps(asdict(r), sort_keys=True) + "\n")
