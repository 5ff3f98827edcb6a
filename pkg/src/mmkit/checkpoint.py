"""Binary checkpoint format shared by the trainer and the CLI.

Layout (all integers little-endian):

    magic   4 bytes  b"ARC1"
    version u32      currently 1
    count   u32      number of tensors
    per tensor:
        name_len u16, name UTF-8 bytes
        frozen   u8  (1 = never trained)
        rank     u32
        dims     u64 * rank
        values   f64 * prod(dims), row-major little-endian

Frozen tensors are stored alongside trainable ones so a checkpoint fully
reproduces a model; loading verifies names, shapes, and frozen flags.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .tensor import Tensor

MAGIC = b"ARC1"
VERSION = 1


def save_checkpoint(path, named: dict[str, Tensor]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    chunks = [MAGIC, struct.pack("<II", VERSION, len(named))]
    for name in sorted(named):
        tensor = named[name]
        blob = name.encode("utf-8")
        data = np.ascontiguousarray(tensor.data, dtype="<f8")
        chunks.append(struct.pack("<H", len(blob)))
        chunks.append(blob)
        chunks.append(struct.pack("<B", 0 if tensor.requires_grad else 1))
        chunks.append(struct.pack("<I", data.ndim))
        chunks.append(struct.pack(f"<{data.ndim}Q", *data.shape) if data.ndim else b"")
        chunks.append(data.tobytes())
    path.write_bytes(b"".join(chunks))


def load_checkpoint(path) -> dict[str, tuple[np.ndarray, bool]]:
    """name -> (values, frozen flag)."""
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ConfigError(f"{path}: not a checkpoint (bad magic {raw[:4]!r})")
    version, count = struct.unpack_from("<II", raw, 4)
    if version != VERSION:
        raise ConfigError(f"{path}: unsupported checkpoint version {version}")
    offset = 12
    out = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", raw, offset)
        offset += 2
        name = raw[offset : offset + name_len].decode("utf-8")
        offset += name_len
        frozen, rank = struct.unpack_from("<BI", raw, offset)
        offset += 5
        dims = struct.unpack_from(f"<{rank}Q", raw, offset) if rank else ()
        offset += 8 * rank
        n = int(np.prod(dims)) if rank else 1
        values = np.frombuffer(raw, dtype="<f8", count=n, offset=offset).reshape(dims).copy()
        offset += 8 * n
        out[name] = (values, bool(frozen))
    if offset != len(raw):
        raise ConfigError(f"{path}: {len(raw) - offset} trailing bytes after last tensor")
    return out


def restore_into(named: dict[str, Tensor], loaded: dict[str, tuple[np.ndarray, bool]]) -> None:
    """Copy checkpoint values into model tensors; strict name/shape/flag match."""
    missing = sorted(set(named) - set(loaded))
    extra = sorted(set(loaded) - set(named))
    if missing or extra:
        raise ConfigError(
            f"checkpoint/config mismatch: missing {missing[:5]}{'...' if len(missing) > 5 else ''}, "
            f"unexpected {extra[:5]}{'...' if len(extra) > 5 else ''}"
        )
    for name, tensor in named.items():
        values, frozen = loaded[name]
        if values.shape != tensor.data.shape:
            raise ConfigError(
                f"checkpoint/config mismatch: {name} has shape {values.shape}, expected {tensor.data.shape}"
            )
        if frozen == tensor.requires_grad:
            raise ConfigError(f"checkpoint/config mismatch: {name} frozen flag disagrees")
        tensor.data[...] = values
