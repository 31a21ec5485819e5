"""Two-stage data-free consistency distillation.

Stage 1 (MLCD) enforces consistency inside each of ``M`` segments, with
training states synthesized from noise by the guided teacher. Stage 2 (ILCD)
enforces consistency across segment milestones, with training states made by
re-noising the student's own few-step samples.
"""

import logging
from dataclasses import dataclass

import numpy as np

from .diffusion import cfg_epsilon, ddim_step, forward_diffuse, mds_sample, milestones
from .nets import Adam, make_model
from .rng import rng

log = logging.getLogger(__name__)


@dataclass
class ConsistencyModel:
    """Noise-predicting net wrapped with the c_skip / c_out boundary blend.

    ``parameterization="blend"`` returns ``c_skip z + c_out x0_hat``;
    ``"raw"`` returns ``x0_hat`` itself (the reading in which the network is
    used directly as an epsilon-predictor). Both satisfy the t = 0 identity.
    """

    net: object
    schedule: object
    sigma_data: float = 0.5
    kappa: float = None
    parameterization: str = "blend"

    def __post_init__(self):
        if self.kappa is None:
            self.kappa = 10.0 / self.schedule.T
        if self.parameterization not in ("blend", "raw"):
            raise ValueError(f"unknown parameterization {self.parameterization!r}")

    def copy(self):
        return ConsistencyModel(self.net.copy(), self.schedule, self.sigma_data, self.kappa,
                                self.parameterization)

    @property
    def params(self):
        return self.net.params

    @params.setter
    def params(self, value):
        self.net.params = value

    def with_params(self, params):
        return ConsistencyModel(self.net.with_params(params), self.schedule, self.sigma_data,
                                self.kappa, self.parameterization)

    def scalings(self, t):
        """(c_skip, c_out) at ``t``; exactly (1, 0) at t = 0."""
        t = np.asarray(t, dtype=np.float64)
        if self.parameterization == "raw":
            return np.zeros_like(t), np.ones_like(t)
        kt = self.kappa * t
        sd2 = self.sigma_data ** 2
        return sd2 / (kt * kt + sd2), kt / np.sqrt(kt * kt + sd2)


def _rows(t, n):
    t = np.asarray(t, dtype=np.float64)
    return np.full(n, float(t)) if t.ndim == 0 else t


def cm_forward(cm, z, t, c):
    """Clean-point estimate and a cache for :func:`cm_backward`."""
    z = np.asarray(z, dtype=np.float64)
    t = _rows(t, z.shape[0])
    a, s = cm.schedule.coeffs(t)
    eps, net_cache = cm.net.forward(z, t, c)
    x0_hat = (z - s[:, None] * eps) / a[:, None]
    c_skip, c_out = cm.scalings(t)
    out = c_skip[:, None] * z + c_out[:, None] * x0_hat
    # raw reading still has to honour the boundary identity
    out = np.where((t == 0)[:, None], z, out)
    d_eps = np.where(t == 0, 0.0, -c_out * s / a)
    return out, (net_cache, d_eps)


def cm_predict(cm, z, t, c):
    return cm_forward(cm, z, t, c)[0]


def cm_backward(cm, cache, upstream):
    """Parameter gradient of ``sum(upstream * cm_predict(...))``."""
    net_cache, d_eps = cache
    grad, _ = cm.net.backward(net_cache, upstream * d_eps[:, None])
    return grad


def g_forward(cm, z, t, target, c):
    """One DDIM jump from ``t`` to ``target`` driven by the student's clean estimate."""
    z = np.asarray(z, dtype=np.float64)
    n = z.shape[0]
    t = _rows(t, n)
    target = _rows(target, n)
    if np.any(target > t):
        raise ValueError("g_transform requires target <= t")
    x0, cache = cm_forward(cm, z, t, c)
    a_t, s_t = cm.schedule.coeffs(t)
    a_g, s_g = cm.schedule.coeffs(target)
    same = t == target
    s_safe = np.where(same, 1.0, s_t)
    k_x = np.where(same, 0.0, a_g - s_g * a_t / s_safe)
    k_z = np.where(same, 1.0, s_g / s_safe)
    out = k_x[:, None] * x0 + k_z[:, None] * z
    out = np.where(same[:, None], z, out)
    return out, (cache, k_x)


def g_transform(cm, z, t, target, c):
    return g_forward(cm, z, t, target, c)[0]


def g_backward(cm, cache, upstream):
    inner, k_x = cache
    return cm_backward(cm, inner, upstream * k_x[:, None])


class FeatureDistance:
    """Squared error between features of a frozen random projector."""

    def __init__(self, dim=2, features=32, hidden=(64,), seed=1234):
        self.projector = make_model(dim, hidden, features, time_dim=0, n_classes=0,
                                    activation="tanh", seed=seed)

    def __call__(self, a, b):
        fa, cache = self.projector.forward(a)
        fb = self.projector(b)
        r = fa - fb
        _, grad_a = self.projector.backward(cache, 2.0 * r / r.size)
        return float(np.mean(r * r)), grad_a


def consistency_distance(kind, a, b, feature=None):
    """Distance value and its gradient w.r.t. ``a`` (``b`` is a stop-gradient target)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if kind == "mse":
        r = a - b
        return float(np.mean(r * r)), 2.0 * r / r.size
    if kind == "feature":
        return (feature or _default_feature())(a, b)
    raise ValueError(f"unknown distance {kind!r}")


_FEATURE = None


def _default_feature():
    global _FEATURE
    if _FEATURE is None:
        _FEATURE = FeatureDistance()
    return _FEATURE


@dataclass(frozen=True)
class DistillConfig:
    M: int = 8
    skip: int = 20
    w: float = 8.0
    p: int = 3
    q: int = 4
    iters_mlcd: int = 12000
    iters_ilcd: int = 2000
    batch: int = 128
    lr_mlcd: float = 1e-4
    lr: float = 1e-5
    distance: str = "mse"
    mds: bool = True
    sigma_data: float = 0.5
    kappa: float = None
    parameterization: str = "blend"

    def __post_init__(self):
        if self.p < 1 or self.q < 1 or self.skip < 1:
            raise ValueError("p, q and skip must be >= 1")


def student_from_teacher(teacher, schedule, cfg):
    return ConsistencyModel(teacher.copy(), schedule, cfg.sigma_data, cfg.kappa,
                            cfg.parameterization)


def initial_states(schedule, teacher, eps, t_m, s, plan, c, w, mds=True):
    """Training states at ``t_m`` from pure noise: MDS, or one guided jump from T."""
    if mds:
        return mds_sample(schedule, teacher, eps, t_m, s, plan, c, w)
    T = float(plan.T)
    eps_hat = cfg_epsilon(teacher, eps, T, c, w)
    return ddim_step(schedule, eps, eps_hat, T, t_m)


def mlcd_batch(schedule, teacher, plan, cfg, n_classes, seed, step):
    """Sample ``(c, s, t_m, t_n, z_tm, z_tn)`` for one MLCD step."""
    g = rng(seed, "mlcd", step)
    B = cfg.batch
    c = g.integers(0, n_classes, size=B)
    s = g.integers(0, plan.M, size=B)
    lo = plan.milestones[s]
    width = plan.milestones[s + 1] - lo
    t_m = (lo + 1 + np.floor(g.random(B) * width)).astype(np.float64)
    eps = g.standard_normal((B, teacher.dim))
    z_tm = initial_states(schedule, teacher, eps, t_m, s, plan, c, cfg.w, cfg.mds)
    t_n = np.maximum(t_m - cfg.skip, lo).astype(np.float64)
    z_tn = ddim_step(schedule, z_tm, cfg_epsilon(teacher, z_tm, t_m, c, cfg.w), t_m, t_n)
    return c, s, t_m, t_n, z_tm, z_tn


def mlcd_loss(student, batch, plan, cfg, feature=None, target_model=None):
    """MLCD loss and parameter gradient for a prepared batch.

    The target branch is evaluated with ``target_model`` (default: the student
    itself) and never differentiated.
    """
    c, s, t_m, t_n, z_tm, z_tn = batch
    floor = plan.milestones[s].astype(np.float64)
    pred, cache = g_forward(student, z_tm, t_m, floor, c)
    target = g_transform(target_model or student, z_tn, t_n, floor, c)
    loss, d_pred = consistency_distance(cfg.distance, pred, target, feature)
    return loss, g_backward(student, cache, d_pred)


def mlcd_step(student, teacher, cfg, seed, step=0, plan=None, feature=None):
    plan = plan or milestones(cfg.M, student.schedule.T, cfg.skip)
    batch = mlcd_batch(student.schedule, teacher, plan, cfg, teacher.n_classes, seed, step)
    return mlcd_loss(student, batch, plan, cfg, feature)


def student_selfsample(cm, eps, q, c, noise_rng, return_last=False):
    """q-step self-sampling: predict the clean point, re-noise to ``T - T/q (i+1)``, repeat.

    Fresh noise is drawn from ``noise_rng`` at every re-noising. With
    ``return_last`` the final ``(z, t)`` fed to the student is also returned so
    callers can differentiate through that last prediction.
    """
    if q < 1:
        raise ValueError("q must be >= 1")
    T = float(cm.schedule.T)
    z = np.asarray(eps, dtype=np.float64)
    t = T
    for i in range(q):
        z_in, t_in = z, t
        x0 = cm_predict(cm, z, t, c)
        t = T - T / q * (i + 1)
        if i < q - 1:
            z = forward_diffuse(cm.schedule, x0, t, noise_rng.standard_normal(x0.shape))
    if return_last:
        return x0, (z_in, t_in)
    return x0


def selfsample_timesteps(q, T):
    """Timesteps reached after each re-noising of :func:`student_selfsample`."""
    return [T - T / q * (i + 1) for i in range(q)]


def teacher_substeps(t_m, interval, p):
    """``(t1, t2)`` pairs splitting ``[t_m - interval, t_m]`` into ``p`` DDIM steps."""
    return [(t_m - interval / p * i, t_m - interval / p * (i + 1)) for i in range(p)]


def ilcd_batch(student, teacher, plan, cfg, seed, step):
    g = rng(seed, "ilcd", step)
    B = cfg.batch
    T = student.schedule.T
    c = g.integers(0, teacher.n_classes, size=B)
    eps = g.standard_normal((B, teacher.dim))
    z0 = student_selfsample(student, eps, cfg.q, c, g)
    s = g.integers(1, plan.M + 1, size=B)
    t_m = plan.milestones[s].astype(np.float64)
    z_tm = forward_diffuse(student.schedule, z0, t_m, g.standard_normal(z0.shape))
    interval = T / plan.M
    z = z_tm
    for t1, t2 in teacher_substeps(t_m, interval, cfg.p):
        z = ddim_step(student.schedule, z, cfg_epsilon(teacher, z, t1, c, cfg.w), t1, t2)
    t_n = t_m - interval
    return c, t_m, t_n, z_tm, z


def ilcd_loss(student, batch, cfg, feature=None, target_model=None):
    c, t_m, t_n, z_tm, z_tn = batch
    pred, cache = cm_forward(student, z_tm, t_m, c)
    target = cm_predict(target_model or student, z_tn, t_n, c)
    loss, d_pred = consistency_distance(cfg.distance, pred, target, feature)
    return loss, cm_backward(student, cache, d_pred)


def ilcd_step(student, teacher, cfg, seed, step=0, plan=None, feature=None):
    T = student.schedule.T
    plan = plan or milestones(cfg.M, T, T // cfg.M)
    batch = ilcd_batch(student, teacher, plan, cfg, seed, step)
    return ilcd_loss(student, batch, cfg, feature)


def _train(student, step_fn, iters, lr, trace, name):
    opt = Adam(student.net.params.size, lr)
    for step in range(iters):
        loss, grad = step_fn(step)
        student.net.params = opt.update(student.net.params, grad)
        if trace is not None:
            trace.append({"iter": step, "loss": loss})
    if trace:
        log.info("%s: loss %.5f -> %.5f", name, trace[0]["loss"], trace[-1]["loss"])
    return student


def train_mlcd(student, teacher, cfg, seed, trace=None, feature=None):
    plan = milestones(cfg.M, student.schedule.T, cfg.skip)
    return _train(student, lambda k: mlcd_step(student, teacher, cfg, seed, k, plan, feature),
                  cfg.iters_mlcd, cfg.lr_mlcd, trace, "mlcd")


def train_ilcd(student, teacher, cfg, seed, trace=None, feature=None):
    T = student.schedule.T
    plan = milestones(cfg.M, T, T // cfg.M)
    return _train(student, lambda k: ilcd_step(student, teacher, cfg, seed, k, plan, feature),
                  cfg.iters_ilcd, cfg.lr, trace, "ilcd")


def sample_student(cm, n, q, labels, seed):
    """``n`` samples from the q-step sampler for the given labels."""
    g = rng(seed, "student-sample")
    labels = np.broadcast_to(np.asarray(labels, dtype=np.int64), (n,))
    eps = g.standard_normal((n, cm.net.dim))
    return student_selfsample(cm, eps, q, labels, g)
