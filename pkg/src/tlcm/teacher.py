"""Synthetic conditional data, teacher denoiser training and the closed-form
Gaussian noise predictor used as a solver oracle."""

import logging
from dataclasses import dataclass

import numpy as np

from .diffusion import NULL_LABEL, forward_diffuse
from .nets import Adam, make_denoiser
from .rng import rng

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class MixtureDataset:
    """K classes, each a mixture of ``n_comp`` isotropic Gaussians on a circle.

    Component ``j`` of class ``k`` sits at angle ``2 pi (k n_comp + j) / (K n_comp)``,
    so each class owns an arc of adjacent modes.
    """

    K: int = 4
    n_comp: int = 2
    radius: float = 4.0
    sigma_c: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if self.K < 1 or self.n_comp < 1:
            raise ValueError("need at least one class and one component")
        if self.K > 1 and self.sigma_c > 0:
            means = self.means
            gap = min(
                np.linalg.norm(means[a][:, None] - means[b][None], axis=-1).min()
                for a in range(self.K) for b in range(a + 1, self.K))
            if gap <= 4 * self.sigma_c:
                raise ValueError(f"class means too close ({gap:.3f} <= 4 sigma_c)")

    @property
    def means(self):
        """Component means, shape ``(K, n_comp, 2)``."""
        idx = np.arange(self.K * self.n_comp).reshape(self.K, self.n_comp)
        ang = 2 * np.pi * idx / (self.K * self.n_comp)
        return self.radius * np.stack([np.cos(ang), np.sin(ang)], axis=-1)

    @property
    def centroids(self):
        return self.means.mean(axis=1)


def sample_dataset(ds, n, seed=None, labels=None, counter=0):
    """``n`` labeled draws. Row ``i`` depends only on ``(seed, counter, i)`` and its label."""
    if n < 1:
        raise ValueError("n must be >= 1")
    seed = ds.seed if seed is None else seed
    if labels is None:
        labels = rng(seed, "data-label", counter).integers(0, ds.K, size=n)
    else:
        labels = np.broadcast_to(np.asarray(labels, dtype=np.int64), (n,)).copy()
    comp = rng(seed, "data-comp", counter).integers(0, ds.n_comp, size=n)
    noise = rng(seed, "data-noise", counter).standard_normal((n, 2))
    return ds.means[labels, comp] + ds.sigma_c * noise, labels


def analytic_gaussian_eps(mu, sigma, z, t, schedule):
    """Exact noise predictor for data ``N(mu, sigma^2 I)``.

    ``eps*(z, t) = (z - sqrt(ab) mu) sqrt(1 - ab) / (ab sigma^2 + 1 - ab)``.
    """
    z = np.asarray(z, dtype=np.float64)
    ab = np.broadcast_to(schedule.alpha_bar_at(t), (z.shape[0],))[:, None]
    mu = np.asarray(mu, dtype=np.float64)
    return (z - np.sqrt(ab) * mu) * np.sqrt(1.0 - ab) / (ab * sigma ** 2 + 1.0 - ab)


def gaussian_oracle(mu, sigma, schedule):
    """``eps_fn(z, t, labels)`` wrapper around :func:`analytic_gaussian_eps` (labels ignored)."""
    return lambda z, t, c: analytic_gaussian_eps(mu, sigma, z, t, schedule)


@dataclass(frozen=True)
class TeacherConfig:
    iters: int = 20000
    batch: int = 256
    lr: float = 1e-3
    dropout: float = 0.1
    seed: int = 0
    lr_schedule: str = "cosine"

    def __post_init__(self):
        if not 0.0 <= self.dropout <= 1.0:
            raise ValueError("dropout must lie in [0, 1]")


def noise_loss_and_grad(model, x0, t, eps, labels, schedule):
    """Mean squared noise-prediction error and its parameter gradient."""
    zt = forward_diffuse(schedule, x0, t, eps)
    out, cache = model.forward(zt, t, labels)
    r = out - eps
    loss = float(np.mean(r * r))
    grad, _ = model.backward(cache, 2.0 * r / r.size)
    return loss, grad


def teacher_batch(ds, schedule, cfg, step, seed):
    x0, labels = sample_dataset(ds, cfg.batch, seed=seed, counter=step)
    g = rng(seed, "teacher-batch", step)
    t = g.integers(1, schedule.T + 1, size=cfg.batch).astype(np.float64)
    eps = g.standard_normal(x0.shape)
    drop = g.random(cfg.batch) < cfg.dropout
    return x0, t, eps, np.where(drop, NULL_LABEL, labels)


def cosine_lr(base, step, iters):
    return base * 0.5 * (1.0 + np.cos(np.pi * step / iters))


def fit_noise_model(model, batch_fn, schedule, iters, lr, trace=None, divergence_window=100,
                    lr_schedule="constant"):
    """Generic Adam loop on the noise-prediction loss; shared with fake-score training."""
    opt = Adam(model.params.size, lr)
    init_loss = None
    bad = 0
    for step in range(iters):
        opt.lr = cosine_lr(lr, step, iters) if lr_schedule == "cosine" else lr
        x0, t, eps, labels = batch_fn(step)
        loss, grad = noise_loss_and_grad(model, x0, t, eps, labels, schedule)
        if init_loss is None:
            init_loss = loss
        bad = bad + 1 if (not np.isfinite(loss) or loss > 10 * init_loss) else 0
        if bad >= divergence_window:
            raise TrainingDiverged(
                f"loss {loss:.4g} above 10x initial {init_loss:.4g} for {bad} steps at step {step}")
        model.params = opt.update(model.params, grad)
        if trace is not None:
            trace.append({"iter": step, "loss": loss})
    return model


def train_teacher(ds, schedule, cfg, model=None, trace=None, hidden=(128, 128, 128),
                  time_dim=16, activation="tanh"):
    """Train an epsilon-prediction teacher with condition dropout."""
    if model is None:
        model = make_denoiser(schedule, 2, hidden, time_dim, ds.K, activation, seed=cfg.seed)
    seed = cfg.seed

    def batch(step):
        return teacher_batch(ds, schedule, cfg, step, seed)

    fit_noise_model(model, batch, schedule, cfg.iters, cfg.lr, trace,
                    lr_schedule=cfg.lr_schedule)
    if trace:
        log.info("teacher: loss %.4f -> %.4f", trace[0]["loss"], trace[-1]["loss"])
    return model
