"""Discrete VP diffusion schedule, DDIM stepping with classifier-free guidance,
milestone plans and the multistep denoising strategy (MDS) used to synthesize
training states from pure noise.

Points are ``(batch, dim)`` arrays; timesteps are per-row real arrays (a
scalar broadcasts). Labels are integer arrays with ``NULL_LABEL`` standing for
the unconditional symbol.
"""

from dataclasses import dataclass

import numpy as np

NULL_LABEL = -1


@dataclass(frozen=True)
class Schedule:
    T: int
    beta: np.ndarray
    alpha_bar: np.ndarray
    beta_start: float = 1e-4
    beta_end: float = 0.02

    def __post_init__(self):
        ab = self.alpha_bar
        if ab.shape != (self.T + 1,) or self.beta.shape != (self.T,):
            raise ValueError("schedule arrays have inconsistent lengths")
        if ab[0] != 1.0:
            raise ValueError("alpha_bar[0] must be exactly 1")
        if not np.all(np.diff(ab) < 0):
            raise ValueError("alpha_bar must be strictly decreasing")
        object.__setattr__(self, "_log_ab", np.log(ab))

    def alpha_bar_at(self, t):
        """alpha_bar at real-valued ``t``, linear in log alpha_bar between grid points."""
        t = np.clip(np.asarray(t, dtype=np.float64), 0.0, self.T)
        lo = np.minimum(np.floor(t).astype(np.int64), self.T - 1)
        frac = t - lo
        out = np.exp(self._log_ab[lo] * (1.0 - frac) + self._log_ab[lo + 1] * frac)
        # integer grid points return the stored table entries untouched
        return np.where(frac == 0.0, self.alpha_bar[lo], np.where(frac == 1.0, self.alpha_bar[lo + 1], out))

    def coeffs(self, t):
        """(sqrt(alpha_bar), sqrt(1 - alpha_bar)) at ``t``."""
        ab = self.alpha_bar_at(t)
        return np.sqrt(ab), np.sqrt(1.0 - ab)


def build_schedule(T=1000, beta_start=1e-4, beta_end=0.02):
    """Linear-beta VP schedule with ``alpha_bar[t] = prod_{i<=t} (1 - beta_i)``."""
    if int(T) != T or T < 2:
        raise ValueError(f"T must be an integer >= 2, got {T!r}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    T = int(T)
    beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha_bar = np.concatenate(([1.0], np.cumprod(1.0 - beta)))
    return Schedule(T=T, beta=beta, alpha_bar=alpha_bar,
                    beta_start=float(beta_start), beta_end=float(beta_end))


def _rows(t, n):
    t = np.asarray(t, dtype=np.float64)
    return np.broadcast_to(t, (n,)).copy() if t.ndim == 0 else t


def forward_diffuse(schedule, z0, t, eps):
    """Noise clean points to timestep ``t``: ``sqrt(ab) z0 + sqrt(1 - ab) eps``."""
    z0 = np.asarray(z0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if z0.shape != eps.shape:
        raise ValueError(f"shape mismatch: z0 {z0.shape} vs eps {eps.shape}")
    t = _rows(t, z0.shape[0])
    if np.any(t < 0) or np.any(t > schedule.T):
        raise ValueError("timestep outside [0, T]")
    a, s = schedule.coeffs(t)
    return a[:, None] * z0 + s[:, None] * eps


def cfg_epsilon(eps_fn, z, t, c, w):
    """Guided noise prediction ``eps(z, null) + w * (eps(z, c) - eps(z, null))``.

    ``eps_fn(z, t, labels)`` is any noise predictor (an ``MlpModel`` or an
    analytic oracle). With ``w == 1`` the unconditional branch is skipped.
    """
    n = z.shape[0]
    t = _rows(t, n)
    c = np.broadcast_to(np.asarray(c, dtype=np.int64), (n,))
    if w == 1.0:
        return eps_fn(z, t, c)
    both = eps_fn(np.concatenate([z, z]), np.concatenate([t, t]),
                  np.concatenate([c, np.full(n, NULL_LABEL, dtype=np.int64)]))
    e_cond, e_null = both[:n], both[n:]
    return e_null + w * (e_cond - e_null)


def ddim_step(schedule, z, eps_hat, t_from, t_to):
    """Deterministic (eta = 0) DDIM transition from ``t_from`` down to ``t_to``."""
    n = z.shape[0]
    t_from = _rows(t_from, n)
    t_to = _rows(t_to, n)
    if np.any(t_to > t_from):
        raise ValueError("ddim_step requires t_to <= t_from")
    a_f, s_f = schedule.coeffs(t_from)
    a_t, s_t = schedule.coeffs(t_to)
    x0 = (z - s_f[:, None] * eps_hat) / a_f[:, None]
    out = a_t[:, None] * x0 + s_t[:, None] * eps_hat
    return np.where((t_to == t_from)[:, None], z, out)


def ddim_multi(schedule, eps_fn, z_init, t_start, t_end, steps, c, w):
    """``steps`` guided DDIM steps on a uniform grid from ``t_start`` to ``t_end``."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    grid = np.linspace(float(t_start), float(t_end), int(steps) + 1)
    z = np.asarray(z_init, dtype=np.float64)
    for t_from, t_to in zip(grid[:-1], grid[1:]):
        eps_hat = cfg_epsilon(eps_fn, z, t_from, c, w)
        z = ddim_step(schedule, z, eps_hat, t_from, t_to)
    return z


@dataclass(frozen=True)
class SegmentPlan:
    M: int
    milestones: np.ndarray
    skip: int

    @property
    def T(self):
        return int(self.milestones[-1])

    def segment_of(self, t):
        """Index s with milestones[s] < t <= milestones[s+1] (t = 0 maps to 0)."""
        s = np.searchsorted(self.milestones, np.asarray(t, dtype=np.float64), side="left") - 1
        return np.clip(s, 0, self.M - 1)


def milestones(M, T, skip=None):
    """Uniform plan ``milestones[s] = s * T / M``; ``skip`` defaults to ``T / M``."""
    if M < 1 or T % M:
        raise ValueError(f"M={M} must be a positive divisor of T={T}")
    ms = np.arange(M + 1, dtype=np.int64) * (T // M)
    skip = T // M if skip is None else int(skip)
    if skip < 1:
        raise ValueError("skip must be >= 1")
    return SegmentPlan(M=int(M), milestones=ms, skip=skip)


def mds_timesteps(t_m, s, plan):
    """Timesteps visited by MDS for one row: ``T, T - dT, ..., t_m`` with ``L = M - s`` steps."""
    T = plan.T
    if not plan.milestones[s] <= t_m <= plan.milestones[s + 1]:
        raise ValueError(f"t_m={t_m} not in segment {s}")
    L = plan.M - s
    dT = (T - t_m) / L
    ts = [T - i * dT for i in range(L)]
    return ts + [float(t_m)]


def mds_sample(schedule, teacher, eps, t_m, s, plan, c, w):
    """Denoise pure noise ``eps`` to ``t_m`` with ``M - s`` guided DDIM steps.

    Rows may carry different ``(t_m, s)``; rows with fewer steps simply stop
    early. Rows with ``t_m == T`` take one zero-length step and come back as ``eps``.
    """
    n = eps.shape[0]
    t_m = _rows(t_m, n)
    s = np.broadcast_to(np.asarray(s, dtype=np.int64), (n,))
    c = np.broadcast_to(np.asarray(c, dtype=np.int64), (n,))
    lo = plan.milestones[s]
    hi = plan.milestones[s + 1]
    if np.any(t_m < lo) or np.any(t_m > hi):
        raise ValueError("t_m outside its segment")
    T = float(plan.T)
    L = plan.M - s
    dT = (T - t_m) / L
    z = np.array(eps, dtype=np.float64)
    for i in range(int(L.max(initial=0))):
        act = np.flatnonzero(i < L)
        t_from = T - i * dT[act]
        t_to = np.where(i == L[act] - 1, t_m[act], t_from - dT[act])
        eps_hat = cfg_epsilon(teacher, z[act], t_from, c[act], w)
        z[act] = ddim_step(schedule, z[act], eps_hat, t_from, t_to)
    return z
