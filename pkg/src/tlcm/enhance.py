"""Data-free enhancement of a distilled student: margin-based reward
optimization, distribution matching against real/fake score nets, and
adversarial training on forward-diffused samples."""

import logging
from dataclasses import dataclass, field

import numpy as np

from .diffusion import cfg_epsilon, forward_diffuse, milestones
from .distill import cm_backward, cm_forward, student_selfsample
from .nets import Adam, make_model
from .rng import rng
from .teacher import noise_loss_and_grad

log = logging.getLogger(__name__)

STAGES = ("reward", "dm", "gan")


@dataclass
class RewardModel:
    """Analytic class-aware reward ``scale * (1 - |x - center_c| / radius)``, floored at ``-scale``."""

    centers: np.ndarray
    radius: float = 3.5
    scale: float = 30.0

    def _dist(self, x, labels):
        d = np.asarray(x, dtype=np.float64) - self.centers[np.asarray(labels)]
        return d, np.sqrt((d * d).sum(axis=1))

    def score(self, x, labels):
        _, r = self._dist(x, labels)
        return np.maximum(self.scale * (1.0 - r / self.radius), -self.scale)

    def grad(self, x, labels):
        """d score / d x; zero where the floor is active or exactly at the center."""
        d, r = self._dist(x, labels)
        active = (self.scale * (1.0 - r / self.radius) > -self.scale) & (r > 0)
        coef = np.where(active, -self.scale / (self.radius * np.where(r > 0, r, 1.0)), 0.0)
        return coef[:, None] * d


def reward_for(ds, radius=3.5, scale=30.0):
    return RewardModel(ds.centroids, radius, scale)


def negative_labels(c_pos, n_classes, g):
    """Uniform draw from the labels different from ``c_pos``."""
    if n_classes < 2:
        raise ValueError("negative labels need at least two classes")
    shift = g.integers(1, n_classes, size=np.shape(c_pos))
    return (np.asarray(c_pos) + shift) % n_classes


def mps_loss(reward, x0, c_pos, c_neg, s0):
    """Hinge reward loss and its gradient w.r.t. ``x0``.

    ``mean(max(s0 - s(x0, c_pos), 0) + max(s(x0, c_neg), 0))``.
    """
    c_pos = np.asarray(c_pos)
    c_neg = np.asarray(c_neg)
    if np.any(c_pos == c_neg):
        raise ValueError("negative labels must differ from positive labels")
    n = x0.shape[0]
    sp = reward.score(x0, c_pos)
    sn = reward.score(x0, c_neg)
    loss = float(np.mean(np.maximum(s0 - sp, 0.0) + np.maximum(sn, 0.0)))
    gp = np.where(s0 - sp > 0, -1.0, 0.0)[:, None] * reward.grad(x0, c_pos)
    gn = np.where(sn > 0, 1.0, 0.0)[:, None] * reward.grad(x0, c_neg)
    return loss, (gp + gn) / n


@dataclass
class ScorePair:
    """Frozen real score (teacher copy) and a trainable fake score."""

    real: object
    fake: object

    @classmethod
    def from_teacher(cls, teacher):
        return cls(teacher.copy(), teacher.copy())


@dataclass
class Discriminator:
    net: object

    @classmethod
    def create(cls, dim=2, hidden=(128, 128), time_dim=16, n_classes=4, T=1000, seed=0):
        return cls(make_model(dim, hidden, 1, time_dim, n_classes, T, "tanh", seed))

    def logits(self, x, t, c):
        return self.net(x, t, c)[:, 0]

    def prob(self, x, t, c):
        return _sigmoid(self.logits(x, t, c))


_CLAMP = 1e-6


def _sigmoid(v):
    return 0.5 * (1.0 + np.tanh(0.5 * v))


def _clamped(logit):
    p = _sigmoid(logit)
    pc = np.clip(p, _CLAMP, 1.0 - _CLAMP)
    return pc, (p == pc)


@dataclass
class EnhanceConfig:
    stages: tuple = ("reward", "dm", "gan")
    s0: float = 16.0
    reward_iters: int = 500
    reward_batch: int = 8
    iters: int = 1000
    batch: int = 4
    lr: float = 1e-5
    d_lr: float = 1e-4
    reward_scale: float = 30.0
    reward_radius: float = 3.5
    w: float = 8.0
    q: int = 4
    M: int = 8

    def __post_init__(self):
        bad = [s for s in self.stages if s not in STAGES]
        if bad:
            raise ValueError(f"unknown enhancement stages {bad}")


def _selfsamples(student, cfg, g, n, n_classes):
    c = g.integers(0, n_classes, size=n)
    eps = g.standard_normal((n, student.net.dim))
    return c, student_selfsample(student, eps, cfg.q, c, g)


def _noisy_student_states(student, cfg, g, n, n_classes):
    """Eq.-9 style states: re-noise student samples to a random milestone."""
    c, z0 = _selfsamples(student, cfg, g, n, n_classes)
    plan = milestones(cfg.M, student.schedule.T)
    t = plan.milestones[g.integers(1, cfg.M + 1, size=n)].astype(np.float64)
    z_t = forward_diffuse(student.schedule, z0, t, g.standard_normal(z0.shape))
    return c, z0, z_t, t


def _t_prime(T, g):
    return float(g.uniform(0.02 * T, 0.98 * T))


def mps_batch(student, cfg, n_classes, seed, step):
    """Labels and the (detached) input of the final self-sampling prediction."""
    g = rng(seed, "mps", step)
    c = g.integers(0, n_classes, size=cfg.reward_batch)
    eps = g.standard_normal((cfg.reward_batch, student.net.dim))
    _, (z_last, t_last) = student_selfsample(student, eps, cfg.q, c, g, return_last=True)
    return c, negative_labels(c, n_classes, g), z_last, t_last


def mps_objective(student, reward, batch, s0):
    """Reward loss, its student-parameter gradient and the mean positive reward."""
    c, c_neg, z_last, t_last = batch
    x0, cache = cm_forward(student, z_last, t_last, c)
    loss, gx = mps_loss(reward, x0, c, c_neg, s0)
    return loss, cm_backward(student, cache, gx), float(np.mean(reward.score(x0, c)))


def mps_step(student, reward, cfg, n_classes, seed, step):
    batch = mps_batch(student, cfg, n_classes, seed, step)
    return mps_objective(student, reward, batch, cfg.s0)


def dfdm_grad(pair, student, t_prime, x0, cache, c, noise, w):
    """Distribution-matching gradient for a student output ``x0`` (with cache).

    Scores are ``-eps / sigma`` at ``t_prime``; the real score is CFG-guided.
    Returns ``(surrogate, grad, diff)`` where ``surrogate = -mean <stopgrad(diff), x0>``.
    """
    n = x0.shape[0]
    sch = student.schedule
    xt = forward_diffuse(sch, x0, t_prime, noise)
    sigma = float(np.sqrt(1.0 - sch.alpha_bar_at(t_prime)))
    e_real = cfg_epsilon(pair.real, xt, t_prime, c, w)
    e_fake = pair.fake(xt, np.full(n, t_prime), c)
    diff = -(e_real - e_fake) / sigma
    surrogate = -float(np.sum(diff * x0)) / n
    return surrogate, cm_backward(student, cache, -diff / n), diff


def dfdm_surrogate(student, z_t, t, c, diff):
    """``-mean <diff, f(z_t)>`` with ``diff`` held fixed; its gradient is the DM update."""
    x0, cache = cm_forward(student, z_t, t, c)
    n = x0.shape[0]
    return -float(np.sum(diff * x0)) / n, cm_backward(student, cache, -diff / n)


def dfdm_step(pair, student, cfg, n_classes, seed, step):
    g = rng(seed, "dfdm", step)
    c, _, z_t, t = _noisy_student_states(student, cfg, g, cfg.batch, n_classes)
    x0, cache = cm_forward(student, z_t, t, c)
    tp = _t_prime(student.schedule.T, g)
    return dfdm_grad(pair, student, tp, x0, cache, c, g.standard_normal(x0.shape), cfg.w)


def fake_score_step(pair, student, opt, cfg, n_classes, seed, step):
    """One noise-prediction update of the fake score on fresh student samples."""
    g = rng(seed, "fake-score", step)
    c, z0 = _selfsamples(student, cfg, g, cfg.batch, n_classes)
    t = g.integers(1, student.schedule.T + 1, size=cfg.batch).astype(np.float64)
    loss, grad = noise_loss_and_grad(pair.fake, z0, t, g.standard_normal(z0.shape), c,
                                     student.schedule)
    pair.fake.params = opt.update(pair.fake.params, grad)
    return loss


def train_fake_score(pair, student, cfg, n_classes, seed, iters, lr=None, trace=None):
    opt = Adam(pair.fake.params.size, cfg.d_lr if lr is None else lr)
    for k in range(iters):
        loss = fake_score_step(pair, student, opt, cfg, n_classes, seed, k)
        if trace is not None:
            trace.append({"iter": k, "loss": loss})
    return pair.fake


def gan_losses(D, real_z0, fake_z0, t_prime, c, seed, schedule):
    """Non-saturating logistic GAN losses on samples diffused to ``t_prime``.

    Returns a dict with ``d_loss``, ``g_loss``, ``grad_d`` (discriminator
    params), ``grad_fake`` (generator loss w.r.t. ``fake_z0``) and ``d_acc``.
    """
    n = real_z0.shape[0]
    tp = np.full(n, float(t_prime))
    a = float(np.sqrt(schedule.alpha_bar_at(t_prime)))
    g = rng(seed, "gan-noise")
    xr = forward_diffuse(schedule, real_z0, tp, g.standard_normal(real_z0.shape))
    xf = forward_diffuse(schedule, fake_z0, tp, g.standard_normal(fake_z0.shape))
    lr_, cache_r = D.net.forward(xr, tp, c)
    lf_, cache_f = D.net.forward(xf, tp, c)
    pr, okr = _clamped(lr_[:, 0])
    pf, okf = _clamped(lf_[:, 0])
    d_loss = float(-np.mean(np.log(pr)) - np.mean(np.log(1.0 - pf)))
    g_loss = float(-np.mean(np.log(pf)))
    # d/dlogit of -log p = -(1 - p); of -log(1 - p) = p; zero where the clamp bites
    up_r = np.where(okr, -(1.0 - pr), 0.0)[:, None] / n
    up_f = np.where(okf, pf, 0.0)[:, None] / n
    gr, _ = D.net.backward(cache_r, up_r)
    gf, _ = D.net.backward(cache_f, up_f)
    up_g = np.where(okf, -(1.0 - pf), 0.0)[:, None] / n
    _, gx = D.net.backward(cache_f, up_g)
    acc = 0.5 * (np.mean(pr > 0.5) + np.mean(pf < 0.5))
    return {"d_loss": d_loss, "g_loss": g_loss, "grad_d": gr + gf, "grad_fake": a * gx,
            "d_acc": float(acc)}


def gan_step(D, student, cfg, n_classes, seed, step):
    g = rng(seed, "gan", step)
    c, z0, z_t, t = _noisy_student_states(student, cfg, g, cfg.batch, n_classes)
    fake, cache = cm_forward(student, z_t, t, c)
    tp = _t_prime(student.schedule.T, g)
    out = gan_losses(D, z0, fake, tp, c, int(g.integers(2**62)), student.schedule)
    out["grad_student"] = cm_backward(student, cache, out["grad_fake"])
    return out


@dataclass
class EnhanceState:
    pair: ScorePair = None
    D: Discriminator = None
    traces: dict = field(default_factory=dict)


def enhance_loop(student, teacher, stages, cfg, seed, reward=None, n_classes=None, state=None):
    """Run the configured stages in order: ``reward`` first, then ``dm``/``gan`` jointly.

    ``dm`` and ``gan`` share one loop: each iteration updates the fake score,
    then the discriminator, then takes one student step on the summed
    generator gradients.
    """
    n_classes = teacher.n_classes if n_classes is None else n_classes
    state = state or EnhanceState()
    stages = tuple(stages)
    bad = [s for s in stages if s not in STAGES]
    if bad:
        raise ValueError(f"unknown enhancement stages {bad}")
    if "reward" in stages:
        if reward is None:
            raise ValueError("reward stage needs a RewardModel")
        opt = Adam(student.net.params.size, cfg.lr)
        tr = state.traces.setdefault("reward", [])
        for k in range(cfg.reward_iters):
            loss, grad, mr = mps_step(student, reward, cfg, n_classes, seed, k)
            student.net.params = opt.update(student.net.params, grad)
            tr.append({"iter": k, "loss": loss, "mean_reward": mr})
    use_dm, use_gan = "dm" in stages, "gan" in stages
    if not (use_dm or use_gan):
        return student
    opt = Adam(student.net.params.size, cfg.lr)
    if use_dm:
        state.pair = state.pair or ScorePair.from_teacher(teacher)
        fake_opt = Adam(state.pair.fake.params.size, cfg.d_lr)
    if use_gan:
        state.D = state.D or Discriminator.create(student.net.dim, n_classes=n_classes,
                                                  T=student.schedule.T, seed=seed)
        d_opt = Adam(state.D.net.params.size, cfg.d_lr)
    tr = state.traces.setdefault("dm+gan" if use_dm and use_gan else stages[-1], [])
    for k in range(cfg.iters):
        rec = {"iter": k}
        grad = np.zeros_like(student.net.params)
        loss = 0.0
        if use_dm:
            rec["fake_loss"] = fake_score_step(state.pair, student, fake_opt, cfg, n_classes,
                                               seed, k)
            sur, g_dm, _ = dfdm_step(state.pair, student, cfg, n_classes, seed, k)
            grad += g_dm
            loss += sur
        if use_gan:
            out = gan_step(state.D, student, cfg, n_classes, seed, k)
            state.D.net.params = d_opt.update(state.D.net.params, out["grad_d"])
            grad += out["grad_student"]
            loss += out["g_loss"]
            rec["d_loss"] = out["d_loss"]
            rec["d_acc"] = out["d_acc"]
        student.net.params = opt.update(student.net.params, grad)
        rec["loss"] = loss
        tr.append(rec)
    return student
