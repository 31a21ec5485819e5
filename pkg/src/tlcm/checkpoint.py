"""Versioned binary checkpoints.

Layout (all integers and floats little-endian)::

    b"TLCM"                      magic
    u32                          format version
    u32 len, utf-8               stage tag: teacher | mlcd | ilcd | enhanced
    u32 T, f64 beta_start, f64 beta_end
    f64[T] beta, f64[T+1] alpha_bar
    u32 len, utf-8               config snapshot (JSON, sorted keys)
    u32 count, then per array:
        u32 len, utf-8 name
        u32 ndim, u64[ndim] shape
        f64[prod(shape)] values
"""

import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .diffusion import Schedule

MAGIC = b"TLCM"
VERSION = 1
STAGES = ("teacher", "mlcd", "ilcd", "enhanced")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    stage: str
    schedule: Schedule
    config: dict
    arrays: dict = field(default_factory=dict)


def _put_str(buf, s):
    raw = s.encode("utf-8")
    buf.write(struct.pack("<I", len(raw)))
    buf.write(raw)


def _put_f64(buf, arr):
    buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def dumps(ckpt):
    if ckpt.stage not in STAGES:
        raise CheckpointError(f"unknown stage tag {ckpt.stage!r}")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    _put_str(buf, ckpt.stage)
    sch = ckpt.schedule
    buf.write(struct.pack("<Idd", sch.T, sch.beta_start, sch.beta_end))
    _put_f64(buf, sch.beta)
    _put_f64(buf, sch.alpha_bar)
    _put_str(buf, json.dumps(ckpt.config, sort_keys=True))
    buf.write(struct.pack("<I", len(ckpt.arrays)))
    for name in sorted(ckpt.arrays):
        arr = np.asarray(ckpt.arrays[name], dtype=np.float64)
        _put_str(buf, name)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        _put_f64(buf, arr)
    return buf.getvalue()


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.data):
            raise CheckpointError("truncated checkpoint")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self):
        (n,) = self.unpack("<I")
        return self.take(n).decode("utf-8")

    def f64(self, count):
        return np.frombuffer(self.take(8 * count), dtype="<f8").astype(np.float64)


def loads(data):
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise CheckpointError("not a TLCM checkpoint (bad magic)")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"checkpoint format version {version}, expected {VERSION}")
    stage = r.string()
    if stage not in STAGES:
        raise CheckpointError(f"unknown stage tag {stage!r}")
    T, b0, b1 = r.unpack("<Idd")
    beta = r.f64(T)
    alpha_bar = r.f64(T + 1)
    schedule = Schedule(T=T, beta=beta, alpha_bar=alpha_bar, beta_start=b0, beta_end=b1)
    config = json.loads(r.string())
    (count,) = r.unpack("<I")
    arrays = {}
    for _ in range(count):
        name = r.string()
        (ndim,) = r.unpack("<I")
        shape = r.unpack(f"<{ndim}Q") if ndim else ()
        arrays[name] = r.f64(int(np.prod(shape, dtype=np.int64))).reshape(shape)
    if r.pos != len(data):
        raise CheckpointError("trailing bytes after checkpoint payload")
    return Checkpoint(stage, schedule, config, arrays)


def save(ckpt, path):
    Path(path).write_bytes(dumps(ckpt))


def load(path):
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc.strerror}") from None
    return loads(data)


# ---------------------------------------------------------------------------
# model packing


def pack_net(arrays, name, net):
    """Store a Denoiser/MlpModel's parameters and layer sizes under ``name/``."""
    inner = getattr(net, "net", net)
    arrays[f"{name}/params"] = inner.params.copy()
    arrays[f"{name}/layer_sizes"] = np.asarray(inner.layer_sizes, dtype=np.float64)


def has_net(ckpt, name):
    return f"{name}/params" in ckpt.arrays


def unpack_net(ckpt, name, kind="denoiser"):
    """Rebuild a network stored by :func:`pack_net` using the checkpoint's config."""
    from .nets import Denoiser, MlpModel

    if not has_net(ckpt, name):
        raise CheckpointError(f"checkpoint has no network {name!r}")
    m = ckpt.config["model"]
    sizes = [int(s) for s in ckpt.arrays[f"{name}/layer_sizes"]]
    n_classes = ckpt.config["data"]["K"]
    time_dim = m["time_dim"]
    dim = sizes[0] - time_dim - n_classes
    net = MlpModel(sizes, ckpt.arrays[f"{name}/params"].copy(), m["activation"], dim,
                   time_dim, n_classes, ckpt.schedule.T)
    if kind == "denoiser":
        return Denoiser(net, ckpt.schedule, m["eps_skip"])
    return net
