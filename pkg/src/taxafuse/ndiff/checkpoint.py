"""Versioned binary checkpoints.

Layout (little-endian):
  magic b"TXFB", uint32 version,
  length-prefixed UTF-8 taxonomy fingerprint,
  length-prefixed UTF-8 fusion-mode tag,
  uint32 tensor count, then per tensor:
    length-prefixed UTF-8 name, uint32 ndim, uint32 dims..., float64 data.

Named tensors cover both learnable parameters and frozen preprocessing
state (normalisation bounds, image stats), so a checkpoint is
self-contained for inference.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

MAGIC = b"TXFB"
VERSION = 1


class CheckpointError(ValueError):
    """Corrupt or incompatible checkpoint file."""


@dataclass(frozen=True)
class CheckpointMeta:
    fingerprint: str
    fusion_tag: str
    version: int = VERSION


def _write_str(fh, s: str) -> None:
    raw = s.encode("utf-8")
    fh.write(struct.pack("<I", len(raw)))
    fh.write(raw)


def _read_exact(fh, n: int) -> bytes:
    raw = fh.read(n)
    if len(raw) != n:
        raise CheckpointError("truncated checkpoint file")
    return raw


def _read_str(fh) -> str:
    (n,) = struct.unpack("<I", _read_exact(fh, 4))
    return _read_exact(fh, n).decode("utf-8")


def save_checkpoint(path, meta: CheckpointMeta, tensors: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        _write_str(fh, meta.fingerprint)
        _write_str(fh, meta.fusion_tag)
        fh.write(struct.pack("<I", len(tensors)))
        for name, array in tensors.items():
            arr = np.ascontiguousarray(array, dtype=np.float64)
            _write_str(fh, name)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.astype("<f8").tobytes())


def load_checkpoint(path) -> tuple[CheckpointMeta, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        if _read_exact(fh, 4) != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
        (version,) = struct.unpack("<I", _read_exact(fh, 4))
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        fingerprint = _read_str(fh)
        fusion_tag = _read_str(fh)
        (count,) = struct.unpack("<I", _read_exact(fh, 4))
        tensors: dict[str, np.ndarray] = {}
        for _ in range(count):
            name = _read_str(fh)
            (ndim,) = struct.unpack("<I", _read_exact(fh, 4))
            shape = struct.unpack(f"<{ndim}I", _read_exact(fh, 4 * ndim))
            n_items = int(np.prod(shape, dtype=np.int64)) if ndim else 1
            data = np.frombuffer(_read_exact(fh, 8 * n_items), dtype="<f8").reshape(shape)
            tensors[name] = data.copy()
    return CheckpointMeta(fingerprint=fingerprint, fusion_tag=fusion_tag, version=version), tensors
