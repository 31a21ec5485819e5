"""Hot numeric kernels with a numba path and a pure-numpy fallback.

Set ``TLCM_DISABLE_NUMBA=1`` before import to force the numpy path. Both
paths are single-threaded and deterministic; they agree to rounding error,
not bit-for-bit.
"""

import os

import numpy as np

_DISABLED = os.environ.get("TLCM_DISABLE_NUMBA", "0").lower() in ("1", "true", "yes")

try:
    if _DISABLED:
        raise ImportError("numba disabled by TLCM_DISABLE_NUMBA")
    from numba import njit

    NUMBA_AVAILABLE = True
except ImportError:
    NUMBA_AVAILABLE = False


# ---------------------------------------------------------------------------
# numpy reference path
# ---------------------------------------------------------------------------

_CHUNK = 1024


def _cross_mean_dist_np(a, b):
    total = 0.0
    for i in range(0, a.shape[0], _CHUNK):
        blk = a[i:i + _CHUNK]
        d = np.sqrt(((blk[:, None, :] - b[None, :, :]) ** 2).sum(-1))
        total += d.sum()
    return total / (a.shape[0] * b.shape[0])


def _self_mean_dist_np(a):
    n = a.shape[0]
    if n < 2:
        return 0.0
    total = 0.0
    for i in range(0, n, _CHUNK):
        blk = a[i:i + _CHUNK]
        d = np.sqrt(((blk[:, None, :] - a[None, :, :]) ** 2).sum(-1))
        total += d.sum()
    # diagonal is exactly zero, so the full sum equals twice the upper triangle
    return total / (n * (n - 1))


def _w2_sorted_np(x, y):
    nx, ny = x.shape[0], y.shape[0]
    if nx == ny:
        return float(np.mean((x - y) ** 2))
    grid = np.union1d(np.arange(1, nx + 1) / nx, np.arange(1, ny + 1) / ny)
    widths = np.diff(np.concatenate(([0.0], grid)))
    mids = grid - 0.5 * widths
    ix = np.minimum((mids * nx).astype(np.int64), nx - 1)
    iy = np.minimum((mids * ny).astype(np.int64), ny - 1)
    return float(np.sum(widths * (x[ix] - y[iy]) ** 2))


# ---------------------------------------------------------------------------
# numba path
# ---------------------------------------------------------------------------

if NUMBA_AVAILABLE:

    @njit(cache=True)
    def _cross_mean_dist_nb(a, b):
        n, m, d = a.shape[0], b.shape[0], a.shape[1]
        total = 0.0
        for i in range(n):
            row = 0.0
            for j in range(m):
                s = 0.0
                for k in range(d):
                    diff = a[i, k] - b[j, k]
                    s += diff * diff
                row += np.sqrt(s)
            total += row
        return total / (n * m)

    @njit(cache=True)
    def _self_mean_dist_nb(a):
        n, d = a.shape[0], a.shape[1]
        if n < 2:
            return 0.0
        total = 0.0
        for i in range(n):
            row = 0.0
            for j in range(i + 1, n):
                s = 0.0
                for k in range(d):
                    diff = a[i, k] - a[j, k]
                    s += diff * diff
                row += np.sqrt(s)
            total += row
        return 2.0 * total / (n * (n - 1))

    @njit(cache=True)
    def _w2_sorted_nb(x, y):
        nx, ny = x.shape[0], y.shape[0]
        if nx == ny:
            s = 0.0
            for i in range(nx):
                diff = x[i] - y[i]
                s += diff * diff
            return s / nx
        # merge the two quantile step functions
        i = 0
        j = 0
        u = 0.0
        s = 0.0
        while i < nx and j < ny:
            ux = (i + 1) / nx
            uy = (j + 1) / ny
            nxt = ux if ux < uy else uy
            diff = x[i] - y[j]
            s += (nxt - u) * diff * diff
            u = nxt
            if ux <= uy:
                i += 1
            if uy <= ux:
                j += 1
        return s


def cross_mean_dist(a, b):
    """Mean Euclidean distance over all pairs (a_i, b_j)."""
    a = np.ascontiguousarray(a, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    if NUMBA_AVAILABLE:
        return float(_cross_mean_dist_nb(a, b))
    return float(_cross_mean_dist_np(a, b))


def self_mean_dist(a):
    """U-statistic mean distance over distinct pairs within ``a``."""
    a = np.ascontiguousarray(a, dtype=np.float64)
    if NUMBA_AVAILABLE:
        return float(_self_mean_dist_nb(a))
    return float(_self_mean_dist_np(a))


def w2_sorted(x, y):
    """Squared 1-D W2 between two sorted samples via quantile coupling."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    y = np.ascontiguousarray(y, dtype=np.float64)
    if NUMBA_AVAILABLE:
        return float(_w2_sorted_nb(x, y))
    return _w2_sorted_np(x, y)


# direct handles for the benchmark and the cross-path tests
numpy_impl = {
    "cross_mean_dist": _cross_mean_dist_np,
    "self_mean_dist": _self_mean_dist_np,
    "w2_sorted": _w2_sorted_np,
}
numba_impl = (
    {
        "cross_mean_dist": _cross_mean_dist_nb,
        "self_mean_dist": _self_mean_dist_nb,
        "w2_sorted": _w2_sorted_nb,
    }
    if NUMBA_AVAILABLE
    else {}
)
