"""Training checkpoints.

Layout (little-endian): magic "MIAT", version u32, epoch u32, config text
(u32 length + UTF-8), model tensors and optimiser tensors (each a u32 count
followed by tensor records), RNG state as JSON (u32 length + UTF-8).
"""
from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO

import numpy as np

from ..errors import CheckpointError
from ..tensor import read_tensors, write_tensors

MAGIC = b"MIAT"
VERSION = 1


@dataclass
class Checkpoint:
    epoch: int
    config_text: str
    model: dict[str, np.ndarray]
    optimizer: dict[str, np.ndarray]
    rng_state: dict

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        write_checkpoint(buf, self)
        return buf.getvalue()


def _write_text(fh: BinaryIO, text: str) -> None:
    raw = text.encode("utf-8")
    fh.write(struct.pack("<I", len(raw)))
    fh.write(raw)


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise CheckpointError("checkpoint is truncated")
    return buf


def _read_text(fh: BinaryIO) -> str:
    (n,) = struct.unpack("<I", _read_exact(fh, 4))
    try:
        return _read_exact(fh, n).decode("utf-8")
    except UnicodeDecodeError:
        raise CheckpointError("checkpoint text block is corrupt") from None


def write_checkpoint(fh: BinaryIO, ckpt: Checkpoint) -> None:
    fh.write(MAGIC)
    fh.write(struct.pack("<II", VERSION, ckpt.epoch))
    _write_text(fh, ckpt.config_text)
    write_tensors(fh, ckpt.model.items())
    write_tensors(fh, ckpt.optimizer.items())
    _write_text(fh, json.dumps(ckpt.rng_state, sort_keys=True))


def read_checkpoint(fh: BinaryIO) -> Checkpoint:
    if fh.read(4) != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version, epoch = struct.unpack("<II", _read_exact(fh, 8))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    config_text = _read_text(fh)
    model = read_tensors(fh)
    optimizer = read_tensors(fh)
    try:
        rng_state = json.loads(_read_text(fh))
    except json.JSONDecodeError:
        raise CheckpointError("checkpoint RNG state is corrupt") from None
    if fh.read(1):
        raise CheckpointError("trailing bytes after checkpoint")
    return Checkpoint(epoch, config_text, model, optimizer, rng_state)


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    Path(path).write_bytes(ckpt.to_bytes())


def load_checkpoint(path: str | Path) -> Checkpoint:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    return read_checkpoint(io.BytesIO(data))


def roundtrip_equal(path: str | Path) -> bool:
    """save(load(path)) reproduces the file byte for byte."""
    original = Path(path).read_bytes()
    return load_checkpoint(path).to_bytes() == original
