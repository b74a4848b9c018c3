import struct
from dataclasses import replace

import numpy as np
import pytest

from lmbisnet.checkpoint import (
    MAGIC,
    CheckpointError,
    apply_checkpoint,
    config_digest,
    load_checkpoint,
    make_checkpoint,
    save_checkpoint,
)
from lmbisnet.model import TINY_CONFIG, NetworkConfig, build_network, forward
from lmbisnet.training import AdamState, History, TrainConfig, adam_step


@pytest.fixture
def trained(tmp_path):
    model = build_network(TINY_CONFIG)
    x = np.random.default_rng(0).normal(size=(2, 3, 8, 8)).astype(np.float32)
    forward(model, x, training=True)  # moves the running statistics
    for p in model.params.values():
        p += np.random.default_rng(1).normal(size=p.shape).astype(np.float32) * 0.01
    return model, x


def test_round_trip_bitwise(tmp_path, trained):
    model, x = trained
    cfg = TrainConfig()
    save_checkpoint(tmp_path / "a.lmbs", make_checkpoint(model, cfg))
    ck = load_checkpoint(tmp_path / "a.lmbs", config_digest(model.config, cfg))
    fresh = apply_checkpoint(build_network(replace(TINY_CONFIG, seed=9)), ck)
    for k in model.params:
        assert model.params[k].tobytes() == fresh.params[k].tobytes()
    for k in model.bn_states:
        assert model.bn_states[k].running_var.tobytes() == fresh.bn_states[k].running_var.tobytes()
    assert forward(model, x).tobytes() == forward(fresh, x).tobytes()


def test_file_layout(tmp_path, trained):
    model, _ = trained
    save_checkpoint(tmp_path / "a.lmbs", make_checkpoint(model, TrainConfig()))
    raw = (tmp_path / "a.lmbs").read_bytes()
    assert raw[:4] == MAGIC
    version, dlen = struct.unpack("<II", raw[4:12])
    assert version == 1 and dlen == 64
    pos = 12 + dlen
    (nlen,) = struct.unpack("<I", raw[pos : pos + 4])
    name = raw[pos + 4 : pos + 4 + nlen].decode()
    shape = struct.unpack("<4I", raw[pos + 4 + nlen : pos + 20 + nlen])
    assert name == "param.enc1.weight" and shape == (2, 3, 3, 3)
    payload = np.frombuffer(raw[pos + 20 + nlen : pos + 20 + nlen + 4 * 54], "<f4")
    assert payload.tobytes() == model.params["enc1.weight"].astype("<f4").tobytes()


def test_tampered_digest_rejected(tmp_path, trained):
    model, _ = trained
    cfg = TrainConfig()
    path = save_checkpoint(tmp_path / "a.lmbs", make_checkpoint(model, cfg))
    raw = bytearray(path.read_bytes())
    raw[12] = ord("0") if raw[12] != ord("0") else ord("1")
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="digest"):
        load_checkpoint(path, config_digest(model.config, cfg))


def test_config_change_rejected(tmp_path, trained):
    model, _ = trained
    path = save_checkpoint(tmp_path / "a.lmbs", make_checkpoint(model, TrainConfig()))
    with pytest.raises(CheckpointError):
        load_checkpoint(path, config_digest(model.config, TrainConfig(learning_rate=0.01)))
    with pytest.raises(CheckpointError):
        load_checkpoint(path, config_digest(replace(model.config, seed=1), TrainConfig()))


def test_truncated_rejected(tmp_path, trained):
    model, _ = trained
    path = save_checkpoint(tmp_path / "a.lmbs", make_checkpoint(model, TrainConfig()))
    raw = path.read_bytes()
    for cut in (2, 10, 80, len(raw) - 3):
        path.write_bytes(raw[:cut])
        with pytest.raises(CheckpointError):
            load_checkpoint(path)


def test_version_and_magic_rejected(tmp_path, trained):
    model, _ = trained
    path = save_checkpoint(tmp_path / "a.lmbs", make_checkpoint(model, TrainConfig()))
    raw = path.read_bytes()
    path.write_bytes(raw[:4] + struct.pack("<I", 2) + raw[8:])
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(path)
    path.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing.lmbs")


def test_shape_mismatch_on_apply(tmp_path, trained):
    model, _ = trained
    ck = make_checkpoint(model, TrainConfig())
    other = build_network(replace(TINY_CONFIG, stage_widths=(3, 4, 8)))
    with pytest.raises(CheckpointError):
        apply_checkpoint(other, ck)


def test_default_size_about_0_7_mb(tmp_path):
    model = build_network(NetworkConfig())
    path = save_checkpoint(tmp_path / "d.lmbs", make_checkpoint(model, TrainConfig()))
    size = path.stat().st_size
    assert 0.65e6 < size < 0.75e6


def test_optimizer_and_history_round_trip(tmp_path, trained):
    model, _ = trained
    opt = AdamState()
    adam_step(model.params, {k: np.ones_like(v) for k, v in model.params.items()}, opt, 0.001)
    hist = History([0.5, 0.4], [0.6, 0.7], [0.001, 0.001])
    path = save_checkpoint(tmp_path / "o.lmbs", make_checkpoint(model, TrainConfig(), opt, hist))
    ck = load_checkpoint(path)
    opt2 = AdamState()
    apply_checkpoint(build_network(TINY_CONFIG), ck, opt2)
    assert opt2.t == 1
    assert all(opt.m[k].tobytes() == opt2.m[k].tobytes() for k in opt.m)
    h = ck.history()
    assert h.val_dice == pytest.approx([0.6, 0.7]) and len(h.lr) == 2


def test_digest_is_stable():
    assert config_digest(TINY_CONFIG, TrainConfig()) == config_digest(TINY_CONFIG, TrainConfig())
    assert len(config_digest(TINY_CONFIG, TrainConfig())) == 64
