"""Small MLPs with hand-written reverse mode.

One ``MlpModel`` type serves as teacher denoiser, consistency student,
real/fake score nets, discriminator and the frozen feature projector. The
network input is ``[z, time_embedding(t), condition_embedding(c)]``; either
embedding can be switched off by giving it zero width.
"""

from dataclasses import dataclass

import numpy as np

from .diffusion import NULL_LABEL
from .rng import rng

_TIME_FREQ_MAX = 50.0


def time_embedding(t, T, dim):
    """Sinusoidal features of ``t / T`` (geometric frequencies 1 .. 50)."""
    t = np.asarray(t, dtype=np.float64)
    if dim == 0:
        return np.zeros((t.shape[0], 0))
    half = dim // 2
    freqs = np.exp(np.linspace(0.0, np.log(_TIME_FREQ_MAX), half))
    arg = (t / T)[:, None] * freqs[None, :]
    return np.concatenate([np.sin(arg), np.cos(arg)], axis=1)


def condition_embedding(c, n_classes):
    """One-hot class features; the null label maps to the zero vector."""
    c = np.asarray(c, dtype=np.int64)
    out = np.zeros((c.shape[0], n_classes))
    if n_classes:
        if np.any((c != NULL_LABEL) & ((c < 0) | (c >= n_classes))):
            raise ValueError(f"labels must lie in [0, {n_classes}) or be NULL")
        rows = np.flatnonzero(c != NULL_LABEL)
        out[rows, c[rows]] = 1.0
    return out


def param_count(layer_sizes):
    return sum((i + 1) * o for i, o in zip(layer_sizes[:-1], layer_sizes[1:]))


def init_params(layer_sizes, seed):
    """Glorot-uniform weights, zero biases, from the ``init`` stream of ``seed``."""
    g = rng(seed, "init")
    chunks = []
    for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        lim = np.sqrt(6.0 / (fan_in + fan_out))
        chunks.append(g.uniform(-lim, lim, size=fan_in * fan_out))
        chunks.append(np.zeros(fan_out))
    return np.concatenate(chunks)


@dataclass
class MlpModel:
    layer_sizes: list
    params: np.ndarray
    activation: str = "tanh"
    dim: int = 2
    time_dim: int = 16
    n_classes: int = 4
    T: int = 1000

    def __post_init__(self):
        self.layer_sizes = [int(s) for s in self.layer_sizes]
        self.params = np.asarray(self.params, dtype=np.float64)
        if self.activation not in ("tanh", "relu"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.layer_sizes[0] != self.dim + self.time_dim + self.n_classes:
            raise ValueError("first layer width must equal dim + time_dim + n_classes")
        if self.params.shape != (param_count(self.layer_sizes),):
            raise ValueError(
                f"expected {param_count(self.layer_sizes)} params, got {self.params.shape}")

    @property
    def out_dim(self):
        return self.layer_sizes[-1]

    def copy(self):
        return MlpModel(list(self.layer_sizes), self.params.copy(), self.activation,
                        self.dim, self.time_dim, self.n_classes, self.T)

    def with_params(self, params):
        m = self.copy()
        m.params = np.asarray(params, dtype=np.float64).copy()
        return m

    def _layers(self, vec):
        off = 0
        for fan_in, fan_out in zip(self.layer_sizes[:-1], self.layer_sizes[1:]):
            W = vec[off:off + fan_in * fan_out].reshape(fan_in, fan_out)
            off += fan_in * fan_out
            b = vec[off:off + fan_out]
            off += fan_out
            yield W, b

    def inputs(self, z, t, c):
        z = np.asarray(z, dtype=np.float64)
        n = z.shape[0]
        if z.ndim != 2 or z.shape[1] != self.dim:
            raise ValueError(f"expected points of shape (n, {self.dim}), got {z.shape}")
        parts = [z]
        if self.time_dim:
            parts.append(time_embedding(np.broadcast_to(np.asarray(t, dtype=np.float64), (n,)),
                                        self.T, self.time_dim))
        if self.n_classes:
            parts.append(condition_embedding(np.broadcast_to(np.asarray(c), (n,)), self.n_classes))
        return np.concatenate(parts, axis=1) if len(parts) > 1 else z

    def forward(self, z, t=None, c=None):
        """Output and a cache for :meth:`backward`."""
        h = self.inputs(z, t, c)
        acts = [h]
        pre = []
        layers = list(self._layers(self.params))
        for i, (W, b) in enumerate(layers):
            a = h @ W + b
            if i < len(layers) - 1:
                pre.append(a)
                h = np.tanh(a) if self.activation == "tanh" else np.maximum(a, 0.0)
                acts.append(h)
            else:
                h = a
        return h, {"acts": acts, "pre": pre}

    def __call__(self, z, t=None, c=None):
        return self.forward(z, t, c)[0]

    def backward(self, cache, upstream):
        """Gradients of ``sum(upstream * output)`` w.r.t. params and the point input.

        Returns ``(grad_params, grad_z)``; ``grad_z`` covers only the first
        ``dim`` input columns (embeddings are not differentiable inputs).
        """
        if cache is None:
            raise RuntimeError("backward called without a matching forward")
        acts, pre = cache["acts"], cache["pre"]
        layers = list(self._layers(self.params))
        grads = []
        g = np.asarray(upstream, dtype=np.float64)
        for i in range(len(layers) - 1, -1, -1):
            W, _ = layers[i]
            grads.append(g.sum(axis=0))
            grads.append((acts[i].T @ g).ravel())
            g = g @ W.T
            if i > 0:
                if self.activation == "tanh":
                    g = g * (1.0 - acts[i] ** 2)
                else:
                    g = g * (pre[i - 1] > 0)
        grads.reverse()
        return np.concatenate(grads), g[:, :self.dim]


def make_model(dim=2, hidden=(128, 128, 128), out_dim=None, time_dim=16, n_classes=4,
               T=1000, activation="tanh", seed=0):
    sizes = [dim + time_dim + n_classes, *hidden, dim if out_dim is None else out_dim]
    return MlpModel(sizes, init_params(sizes, seed), activation, dim, time_dim, n_classes, T)


class Denoiser:
    """Noise predictor ``sqrt(1 - alpha_bar_t) * z + net(z, t, c)``.

    The skip term is the exact predictor for unit-variance data, so the net
    only fits a residual; at high noise levels that residual is small and
    must be accurate, because clean-point estimates divide by sqrt(alpha_bar).
    Exposes the same forward/backward surface as :class:`MlpModel`.
    """

    def __init__(self, net, schedule, skip=True):
        self.net = net
        self.schedule = schedule
        self.skip = bool(skip)

    params = property(lambda self: self.net.params,
                      lambda self, v: setattr(self.net, "params", np.asarray(v, dtype=np.float64)))
    dim = property(lambda self: self.net.dim)
    n_classes = property(lambda self: self.net.n_classes)
    out_dim = property(lambda self: self.net.out_dim)

    def copy(self):
        return Denoiser(self.net.copy(), self.schedule, self.skip)

    def with_params(self, params):
        return Denoiser(self.net.with_params(params), self.schedule, self.skip)

    def _skip(self, z, t):
        n = z.shape[0]
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (n,))
        return np.sqrt(1.0 - self.schedule.alpha_bar_at(t))[:, None]

    def forward(self, z, t=None, c=None):
        z = np.asarray(z, dtype=np.float64)
        out, cache = self.net.forward(z, t, c)
        if not self.skip:
            return out, (cache, None)
        k = self._skip(z, t)
        return out + k * z, (cache, k)

    def __call__(self, z, t=None, c=None):
        return self.forward(z, t, c)[0]

    def backward(self, cache, upstream):
        net_cache, k = cache
        grad, grad_z = self.net.backward(net_cache, upstream)
        if k is not None:
            grad_z = grad_z + k * upstream
        return grad, grad_z


def make_denoiser(schedule, dim=2, hidden=(128, 128, 128), time_dim=16, n_classes=4,
                  activation="tanh", seed=0, skip=True):
    net = make_model(dim, hidden, dim, time_dim, n_classes, schedule.T, activation, seed)
    return Denoiser(net, schedule, skip)


@dataclass
class GradReport:
    max_rel_err: float
    param_index_worst: int


def finite_diff_check(loss_and_grad, params, probes=20, seed=0, h=1e-5, floor=1e-6):
    """Compare analytic and central-difference gradients on random coordinates.

    ``loss_and_grad(params) -> (loss, grad)``. The relative error at a probe is
    ``|a - n| / max(|a|, |n|, floor)``.
    """
    params = np.asarray(params, dtype=np.float64)
    _, grad = loss_and_grad(params)
    idx = rng(seed, "fd-probes").choice(params.size, size=min(probes, params.size), replace=False)
    worst, worst_i = 0.0, int(idx[0]) if idx.size else -1
    for i in idx:
        p = params.copy()
        p[i] += h
        lp = loss_and_grad(p)[0]
        p[i] -= 2 * h
        lm = loss_and_grad(p)[0]
        num = (lp - lm) / (2 * h)
        a = grad[i]
        err = abs(a - num) / max(abs(a), abs(num), floor)
        if err > worst:
            worst, worst_i = err, int(i)
    return GradReport(float(worst), worst_i)


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, n):
        return cls(np.zeros(n), np.zeros(n), 0)


def adam_step(params, grads, state, lr, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
    """One AdamW update. Returns ``(new_params, new_state)``; inputs are not mutated."""
    grads = np.asarray(grads, dtype=np.float64)
    if grads.shape != params.shape:
        raise ValueError(f"grad shape {grads.shape} != param shape {params.shape}")
    if not np.all(np.isfinite(grads)):
        bad = np.flatnonzero(~np.isfinite(grads))
        raise FloatingPointError(
            f"non-finite gradient at {bad.size} coordinates (first index {bad[0]})")
    b1, b2 = betas
    step = state.step + 1
    m = b1 * state.m + (1 - b1) * grads
    v = b2 * state.v + (1 - b2) * grads * grads
    m_hat = m / (1 - b1 ** step)
    v_hat = v / (1 - b2 ** step)
    new = params - lr * (m_hat / (np.sqrt(v_hat) + eps) + weight_decay * params)
    return new, AdamState(m, v, step)


class Adam:
    """Stateful convenience wrapper around :func:`adam_step`."""

    def __init__(self, n, lr, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.state = AdamState.zeros(n)
        self.lr, self.betas, self.eps, self.weight_decay = lr, betas, eps, weight_decay

    def update(self, params, grads):
        params, self.state = adam_step(params, grads, self.state, self.lr, self.betas,
                                       self.eps, self.weight_decay)
        return params
