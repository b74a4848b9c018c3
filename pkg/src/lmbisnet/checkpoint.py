"""Binary checkpoint files.

Layout (all integers little-endian)::

    b"LMBS"  u32 version  u32 digest_len  digest bytes
    repeated: u32 name_len  name bytes  4 x u32 shape  float32 payload

Lower-rank arrays are stored with trailing unit dimensions and restored to
their model shape on load.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .model import Model, NetworkConfig
from .training import AdamState, History, TrainConfig

MAGIC = b"LMBS"
VERSION = 1


class CheckpointError(Exception):
    """Unreadable, truncated or mismatched checkpoint."""


def config_digest(net: NetworkConfig, train: TrainConfig) -> str:
    """SHA-256 over the canonical JSON of both configs."""
    blob = json.dumps({"network": asdict(net), "train": asdict(train)}, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


@dataclass
class Checkpoint:
    digest: str
    tensors: dict = field(default_factory=dict)
    version: int = VERSION

    def history(self) -> History:
        h = History()
        for key, attr in (("history.train_loss", "train_loss"), ("history.val_dice", "val_dice"), ("history.lr", "lr")):
            if key in self.tensors:
                getattr(h, attr).extend(float(v) for v in self.tensors[key].ravel())
        return h


def _as4d(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype="<f4")
    if a.ndim > 4:
        raise CheckpointError(f"cannot store a {a.ndim}-D array")
    return a.reshape(a.shape + (1,) * (4 - a.ndim))


def make_checkpoint(model: Model, train_config: TrainConfig, optimizer: AdamState | None = None,
                    history: History | None = None) -> Checkpoint:
    ck = Checkpoint(config_digest(model.config, train_config))
    t = ck.tensors
    for name, p in model.params.items():
        t[f"param.{name}"] = _as4d(p)
    for name, st in model.bn_states.items():
        t[f"bn.{name}.running_mean"] = _as4d(st.running_mean)
        t[f"bn.{name}.running_var"] = _as4d(st.running_var)
    if optimizer is not None:
        t["adam.t"] = _as4d(np.array([optimizer.t]))
        for name in optimizer.m:
            t[f"adam.m.{name}"] = _as4d(optimizer.m[name])
            t[f"adam.v.{name}"] = _as4d(optimizer.v[name])
    if history is not None:
        t["history.train_loss"] = _as4d(np.array(history.train_loss))
        t["history.val_dice"] = _as4d(np.array(history.val_dice))
        t["history.lr"] = _as4d(np.array(history.lr))
    return ck


def apply_checkpoint(model: Model, ck: Checkpoint, optimizer: AdamState | None = None) -> Model:
    """Copy stored parameters and running statistics into ``model`` in place."""
    t = ck.tensors

    def take(key, target):
        if key not in t:
            raise CheckpointError(f"checkpoint lacks {key}")
        if t[key].size != target.size:
            raise CheckpointError(f"{key}: stored {t[key].shape}, model expects {target.shape}")
        target[...] = t[key].reshape(target.shape)

    for name, p in model.params.items():
        take(f"param.{name}", p)
    for name, st in model.bn_states.items():
        take(f"bn.{name}.running_mean", st.running_mean)
        take(f"bn.{name}.running_var", st.running_var)
    if optimizer is not None and "adam.t" in t:
        optimizer.t = int(t["adam.t"].ravel()[0])
        for name, p in model.params.items():
            if f"adam.m.{name}" in t:
                optimizer.m[name] = t[f"adam.m.{name}"].reshape(p.shape).astype(p.dtype)
                optimizer.v[name] = t[f"adam.v.{name}"].reshape(p.shape).astype(p.dtype)
    return model


def save_checkpoint(path, ck: Checkpoint) -> Path:
    path = Path(path)
    digest = ck.digest.encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", ck.version, len(digest)))
        fh.write(digest)
        for name, arr in ck.tensors.items():
            a = _as4d(arr)
            nb = name.encode()
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<4I", *a.shape))
            fh.write(np.ascontiguousarray(a).tobytes())
    return path


def load_checkpoint(path, expected_digest: str | None = None) -> Checkpoint:
    """Read a checkpoint; if ``expected_digest`` is given it must match the stored one."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(raw):
            raise CheckpointError(f"truncated checkpoint {path}")
        chunk = raw[pos : pos + n]
        pos += n
        return chunk

    if take(4) != MAGIC:
        raise CheckpointError(f"{path} is not an LMBS checkpoint")
    version, dlen = struct.unpack("<II", take(8))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}, expected {VERSION}")
    digest = take(dlen).decode("ascii", errors="replace")
    if expected_digest is not None and digest != expected_digest:
        raise CheckpointError("config digest mismatch: checkpoint was written for a different configuration")
    tensors = {}
    while pos < len(raw):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode()
        shape = struct.unpack("<4I", take(16))
        count = int(np.prod(shape))
        tensors[name] = np.frombuffer(take(4 * count), dtype="<f4").reshape(shape).astype(np.float32)
    return Checkpoint(digest, tensors, version)
