"""Versioned binary checkpoints.

Layout (all integers little-endian)::

    magic      8 bytes  b"SHKSHK\\x00\\x01"
    version    u32
    meta_len   u32, then meta_len bytes of UTF-8 JSON (epoch, RNG state, configs)
    n_tensors  u32, then per tensor:
        name_len u16, name (UTF-8)
        dtype    u8   (0 = float32, 1 = float64, 2 = int64)
        ndim     u8, then ndim x u64 extents
        raw little-endian values
    crc32      u32 over everything above

Tensor names are prefixed ``param/``, ``buffer/`` or ``momentum/``.
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import DatasetStats
from .errors import FormatError
from .models import ModelSpec, ShakeNet, build_model, tie_branches
from .train import TrainConfig, Trainer

MAGIC = b"SHKSHK\x00\x01"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}
_CODES = {np.dtype(v).newbyteorder("="): k for k, v in _DTYPES.items()}


def write_checkpoint(path, tensors: dict[str, np.ndarray], meta: dict) -> None:
    chunks = [MAGIC, struct.pack("<I", VERSION)]
    meta_bytes = json.dumps(meta, sort_keys=True).encode()
    chunks += [struct.pack("<I", len(meta_bytes)), meta_bytes, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        code = _CODES.get(arr.dtype.newbyteorder("="))
        if code is None:
            raise TypeError(f"unsupported dtype {arr.dtype} for {name}")
        nb = name.encode()
        chunks.append(struct.pack("<H", len(nb)) + nb + struct.pack("<BB", code, arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    body = b"".join(chunks)
    tmp = Path(f"{path}.tmp")
    with open(tmp, "wb") as f:
        f.write(body + struct.pack("<I", zlib.crc32(body)))
    os.replace(tmp, path)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError("checkpoint is truncated")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    try:
        buf = Path(path).read_bytes()
    except FileNotFoundError:
        raise FormatError(f"checkpoint not found: {path}") from None
    if len(buf) < len(MAGIC) + 8 or buf[: len(MAGIC)] != MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic or truncated)")
    body, (crc,) = buf[:-4], struct.unpack("<I", buf[-4:])
    if zlib.crc32(body) != crc:
        raise FormatError(f"{path}: checksum mismatch (truncated or corrupted)")
    r = _Reader(body)
    r.take(len(MAGIC))
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    (meta_len,) = r.unpack("<I")
    meta = json.loads(r.take(meta_len).decode())
    (count,) = r.unpack("<I")
    tensors = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode()
        code, ndim = r.unpack("<BB")
        if code not in _DTYPES:
            raise FormatError(f"{path}: unknown dtype code {code} for {name}")
        shape = r.unpack(f"<{ndim}Q")
        dt = _DTYPES[code]
        size = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        tensors[name] = np.frombuffer(r.take(size), dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
    if r.pos != len(body):
        raise FormatError(f"{path}: trailing bytes after tensor table")
    return tensors, meta


def _model_tensors(model: ShakeNet) -> dict[str, np.ndarray]:
    out = {f"param/{k}": p.data for k, p in model.params.items()}
    out.update({f"buffer/{k}": v for k, v in model.named_buffers().items()})
    return out


def _model_meta(model: ShakeNet) -> dict:
    tied = all(b.branch2 is b.branch1 for b in model.blocks)
    return {"model": model.spec.to_dict(), "dtype": model.dtype.name, "tied_branches": tied}


def save_model(path, model: ShakeNet, meta: dict | None = None) -> None:
    meta = {"kind": "model", **_model_meta(model), **(meta or {})}
    write_checkpoint(path, _model_tensors(model), meta)


def _apply_model_tensors(model: ShakeNet, tensors: dict[str, np.ndarray], path) -> None:
    """Validate every tensor first, then copy; a mismatch leaves ``model`` untouched."""
    params, buffers = model.params, model.named_buffers()
    expected = {f"param/{k}": p.data for k, p in params.items()}
    expected.update({f"buffer/{k}": v for k, v in buffers.items()})
    missing = sorted(set(expected) - set(tensors))
    if missing:
        raise FormatError(f"{path}: missing tensors {missing[:3]}")
    for name, target in expected.items():
        if tensors[name].shape != target.shape:
            raise FormatError(f"{path}: shape mismatch for {name}: {tensors[name].shape} vs {target.shape}")
    for name, target in expected.items():
        target[...] = tensors[name]


def load_model(path) -> tuple[ShakeNet, dict]:
    tensors, meta = read_checkpoint(path)
    return load_model_from(tensors, meta, path)


@dataclass
class TrainingState:
    """Everything needed to resume a run bit-for-bit."""

    model: ShakeNet
    meta: dict
    tensors: dict[str, np.ndarray]

    def restore_trainer(self, trainer: Trainer) -> Trainer:
        velocity = {k[len("momentum/") :]: v for k, v in self.tensors.items() if k.startswith("momentum/")}
        for name, v in velocity.items():
            if name not in trainer.model.params._params or v.shape != trainer.model.params[name].shape:
                raise FormatError(f"momentum buffer {name} does not match the model")
        trainer.optimizer.velocity = {k: v.copy() for k, v in velocity.items()}
        trainer.coeff_rng.set_state(self.meta["coeff_rng"])
        trainer.epoch = int(self.meta["epoch"])
        trainer.stats = DatasetStats.from_dict(self.meta["stats"])
        return trainer


def save_training(path, trainer: Trainer, extra: dict | None = None) -> None:
    model = trainer.model
    tensors = _model_tensors(model)
    tensors.update({f"momentum/{k}": v for k, v in trainer.optimizer.velocity.items()})
    meta = {
        "kind": "training",
        **_model_meta(model),
        "train": trainer.cfg.to_dict(),
        "epoch": trainer.epoch,
        "coeff_rng": trainer.coeff_rng.get_state(),
        "stats": trainer.stats.to_dict(),
        **(extra or {}),
    }
    write_checkpoint(path, tensors, meta)


def load_model_from(tensors, meta, path) -> tuple[ShakeNet, dict]:
    try:
        spec = ModelSpec.from_dict(meta["model"])
        dtype = np.dtype(meta.get("dtype", "float32"))
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: bad model metadata ({exc})") from None
    model = build_model(spec, dtype=dtype)
    if meta.get("tied_branches"):
        tie_branches(model)
    _apply_model_tensors(model, tensors, path)
    return model, meta


def load_training(path) -> TrainingState:
    tensors, meta = read_checkpoint(path)
    for key in ("model", "epoch", "coeff_rng", "stats", "train"):
        if key not in meta:
            raise FormatError(f"{path}: not a training checkpoint (missing {key!r})")
    model, _ = load_model_from(tensors, meta, path)
    return TrainingState(model, meta, tensors)


def resume_trainer(path, train_set, test_set, augment: bool = True) -> Trainer:
    state = load_training(path)
    cfg = TrainConfig(**state.meta["train"])
    trainer = Trainer(state.model, train_set, test_set, cfg, augment)
    return state.restore_trainer(trainer)
