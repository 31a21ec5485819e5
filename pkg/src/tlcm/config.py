"""Run configuration: a nested key/value tree with normative defaults.

Files are YAML. Precedence is ``--set``/flag overrides > file > defaults.
Unknown keys are rejected at every level.
"""

import copy
import hashlib
import json
from pathlib import Path

import yaml

DEFAULTS = {
    "schedule": {"T": 1000, "beta_start": 1e-4, "beta_end": 0.02},
    "data": {"K": 4, "sigma_c": 0.3, "radius": 4.0, "n_comp": 2},
    "model": {"hidden": [128, 128, 128], "activation": "tanh", "time_dim": 16,
              "eps_skip": True},
    "teacher": {"iters": 20000, "batch": 256, "lr": 1e-3, "dropout": 0.1,
                "lr_schedule": "cosine"},
    "distill": {"M": 8, "skip": 20, "w": 8.0, "p": 3, "q": 4,
                "iters_mlcd": 12000, "iters_ilcd": 2000, "batch": 128,
                "lr": 1e-5, "lr_mlcd": 1e-4, "distance": "mse", "mds": True,
                "sigma_data": 0.5, "kappa_scale": 10.0, "parameterization": "blend"},
    "enhance": {"stages": ["reward", "dm", "gan"], "s0": 16.0,
                "reward_iters": 500, "reward_batch": 8, "iters": 1000, "batch": 4,
                "lr": 1e-5, "d_lr": 1e-4, "reward_scale": 30.0, "reward_radius": 3.5},
    "eval": {"steps": [1, 2, 3, 4, 6, 8], "n": 8192, "projections": 128,
             "teacher_steps": 64, "per_class": True, "wall_clock": True},
    "seed": 0,
}


class ConfigError(ValueError):
    pass


def default_config():
    return copy.deepcopy(DEFAULTS)


def _coerce(default, value, key):
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("true", "false"):
            return value.lower() == "true"
        raise ConfigError(f"{key}: expected a boolean, got {value!r}")
    if isinstance(default, int):
        if isinstance(value, bool) or not (isinstance(value, int) or
                                           (isinstance(value, float) and value.is_integer())):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return int(value)
    if isinstance(default, float):
        try:
            # YAML 1.1 reads "1e-4" as a string
            return float(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{key}: expected a number, got {value!r}") from None
    if isinstance(default, list):
        if isinstance(value, str):
            value = [yaml.safe_load(v) for v in value.split(",") if v.strip()]
        if not isinstance(value, list):
            raise ConfigError(f"{key}: expected a list, got {value!r}")
        if default:
            return [_coerce(default[0], v, key) for v in value]
        return list(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected a string, got {value!r}")
        return value
    return value


def merge(base, override, prefix=""):
    """Return ``base`` updated with ``override``; unknown keys raise ``ConfigError``."""
    out = copy.deepcopy(base)
    for key, value in (override or {}).items():
        path = f"{prefix}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {path!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{path}: expected a table")
            out[key] = merge(base[key], value, path + ".")
        else:
            out[key] = _coerce(base[key], value, path)
    return out


def parse_override(text):
    """``"distill.M=4"`` -> ``{"distill": {"M": 4}}``."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    value = yaml.safe_load(raw) if raw.strip() else ""
    tree = node = {}
    parts = key.strip().split(".")
    for part in parts[:-1]:
        node[part] = {}
        node = node[part]
    node[parts[-1]] = value
    return tree


def read_config_file(path):
    """Raw (unmerged) tree from a YAML file."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        data = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError("config file must hold a table at top level")
    return data


def load_config(path=None, overrides=(), seed=None):
    cfg = default_config()
    if path is not None:
        cfg = merge(cfg, read_config_file(path))
    for item in overrides:
        cfg = merge(cfg, parse_override(item) if isinstance(item, str) else item)
    if seed is not None:
        cfg["seed"] = int(seed)
    return cfg


def dump_config(cfg, path=None):
    text = yaml.safe_dump(cfg, sort_keys=False, default_flow_style=None)
    if path is not None:
        Path(path).write_text(text, encoding="utf-8")
    return text


def config_hash(cfg):
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


# ---------------------------------------------------------------------------
# typed views


def schedule_of(cfg):
    from .diffusion import build_schedule
    s = cfg["schedule"]
    return build_schedule(s["T"], s["beta_start"], s["beta_end"])


def dataset_of(cfg):
    from .teacher import MixtureDataset
    d = cfg["data"]
    return MixtureDataset(d["K"], d["n_comp"], d["radius"], d["sigma_c"], cfg["seed"])


def teacher_config_of(cfg):
    from .teacher import TeacherConfig
    t = cfg["teacher"]
    return TeacherConfig(t["iters"], t["batch"], t["lr"], t["dropout"], cfg["seed"],
                         t["lr_schedule"])


def distill_config_of(cfg):
    from .distill import DistillConfig
    d = dict(cfg["distill"])
    kappa = d.pop("kappa_scale") / cfg["schedule"]["T"]
    return DistillConfig(kappa=kappa, **d)


def enhance_config_of(cfg):
    from .enhance import EnhanceConfig
    e = dict(cfg["enhance"])
    d = cfg["distill"]
    e["stages"] = tuple(e["stages"])
    return EnhanceConfig(w=d["w"], q=d["q"], M=d["M"], **e)
