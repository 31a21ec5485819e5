import struct

import numpy as np
import pytest

from tlcm import checkpoint as ckp
from tlcm import config as C
from tlcm.diffusion import build_schedule
from tlcm.pipeline import make_student, new_teacher


def _leaves(tree, prefix=""):
    for k, v in tree.items():
        if isinstance(v, dict):
            yield from _leaves(v, f"{prefix}{k}.")
        else:
            yield f"{prefix}{k}", v


def _get(cfg, key):
    node = cfg
    for part in key.split("."):
        node = node[part]
    return node


def _other(v):
    if isinstance(v, bool):
        return not v, not v
    if isinstance(v, int):
        return v + 3, v + 5
    if isinstance(v, float):
        return v * 2 + 1, v * 3 + 2
    if isinstance(v, list):
        return v[:1], v[-1:]
    if isinstance(v, str):
        return v + "a", v + "b"
    raise TypeError(v)


def _yaml_value(v):
    import yaml
    return yaml.safe_dump(v, default_flow_style=True).strip().removesuffix("...").strip()


@pytest.mark.parametrize("key", [k for k, _ in _leaves(C.DEFAULTS)])
def test_precedence_per_key(key, tmp_path):
    default = _get(C.DEFAULTS, key)
    file_val, flag_val = _other(default)
    parts = key.split(".")
    tree = node = {}
    for p in parts[:-1]:
        node[p] = {}
        node = node[p]
    node[parts[-1]] = file_val
    path = tmp_path / "c.yaml"
    C.dump_config(tree, path)
    assert _get(C.load_config(), key) == default
    assert _get(C.load_config(path), key) == file_val
    got = _get(C.load_config(path, [f"{key}={_yaml_value(flag_val)}"]), key)
    assert got == flag_val


def test_seed_flag_beats_everything(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text("seed: 3\n")
    assert C.load_config(path, ["seed=4"], seed=5)["seed"] == 5


def test_unknown_keys_and_bad_types_rejected(tmp_path):
    with pytest.raises(C.ConfigError):
        C.load_config(overrides=["distill.nope=1"])
    with pytest.raises(C.ConfigError):
        C.load_config(overrides=["distill.M=abc"])
    with pytest.raises(C.ConfigError):
        C.load_config(overrides=["distill=3"])
    with pytest.raises(C.ConfigError):
        C.load_config(overrides=["novalue"])
    bad = tmp_path / "bad.yaml"
    bad.write_text("- 1\n- 2\n")
    with pytest.raises(C.ConfigError):
        C.load_config(bad)
    with pytest.raises(C.ConfigError):
        C.load_config(tmp_path / "missing.yaml")


def test_yaml_scientific_notation_coerced(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text("teacher:\n  lr: 1e-4\n")
    assert C.load_config(path)["teacher"]["lr"] == 1e-4


def test_config_round_trip(tmp_path):
    cfg = C.load_config(overrides=["distill.M=4", "enhance.stages=[reward]", "eval.steps=1,2"])
    assert cfg["eval"]["steps"] == [1, 2]
    path = tmp_path / "rt.yaml"
    C.dump_config(cfg, path)
    assert C.load_config(path) == cfg
    assert C.config_hash(cfg) == C.config_hash(C.load_config(path))
    assert C.config_hash(cfg) != C.config_hash(C.default_config())


def test_typed_views():
    cfg = C.default_config()
    d = C.distill_config_of(cfg)
    assert (d.M, d.skip, d.w, d.p, d.q) == (8, 20, 8.0, 3, 4)
    assert (d.lr_mlcd, d.lr) == (1e-4, 1e-5)
    assert d.kappa == pytest.approx(0.01)
    e = C.enhance_config_of(cfg)
    assert (e.s0, e.reward_iters, e.reward_batch, e.iters, e.batch, e.d_lr) == (16.0, 500, 8, 1000, 4, 1e-4)


def _ckpt(stage):
    cfg = C.load_config(overrides=["model.hidden=[8,8]"])
    teacher = new_teacher(cfg)
    arrays = {}
    ckp.pack_net(arrays, "teacher", teacher)
    ckp.pack_net(arrays, "student", make_student(cfg, teacher).net)
    arrays["misc/scalar"] = np.array(3.25)
    return ckp.Checkpoint(stage, teacher.schedule, cfg, arrays), teacher


@pytest.mark.parametrize("stage", ckp.STAGES)
def test_checkpoint_round_trip_bit_exact(stage, tmp_path):
    ck, teacher = _ckpt(stage)
    path = tmp_path / "x.ckpt"
    ckp.save(ck, path)
    back = ckp.load(path)
    assert back.stage == stage and back.config == ck.config
    assert back.schedule.T == 1000
    assert np.array_equal(back.schedule.alpha_bar, ck.schedule.alpha_bar)
    assert set(back.arrays) == set(ck.arrays)
    for k in ck.arrays:
        assert back.arrays[k].tobytes() == np.asarray(ck.arrays[k], dtype=np.float64).tobytes()
    assert ckp.dumps(back) == path.read_bytes()
    net = ckp.unpack_net(back, "teacher")
    z = np.ones((2, 2))
    assert np.array_equal(net(z, [5.0, 9.0], [0, 1]), teacher(z, [5.0, 9.0], [0, 1]))


def test_checkpoint_errors(tmp_path):
    ck, _ = _ckpt("teacher")
    raw = ckp.dumps(ck)
    assert raw[:4] == b"TLCM" and struct.unpack("<I", raw[4:8])[0] == ckp.VERSION
    bumped = raw[:4] + struct.pack("<I", ckp.VERSION + 1) + raw[8:]
    with pytest.raises(ckp.CheckpointError, match="version"):
        ckp.loads(bumped)
    with pytest.raises(ckp.CheckpointError, match="magic"):
        ckp.loads(b"XXXX" + raw[4:])
    with pytest.raises(ckp.CheckpointError, match="truncated"):
        ckp.loads(raw[:-5])
    with pytest.raises(ckp.CheckpointError, match="trailing"):
        ckp.loads(raw + b"\0")
    with pytest.raises(ckp.CheckpointError):
        ckp.dumps(ckp.Checkpoint("bogus", build_schedule(), {}, {}))
    with pytest.raises(ckp.CheckpointError):
        ckp.load(tmp_path / "absent.ckpt")
    with pytest.raises(ckp.CheckpointError):
        ckp.unpack_net(ck, "discriminator")
