"""Binary model checkpoints.

Layout (all integers little-endian):

    magic         8 bytes, b"FFCKPT01"
    u32           fingerprint length, then fingerprint bytes (ascii hex)
    u32           config text length, then UTF-8 key=value lines
    u32           tensor count
    per tensor:
        u32       name length, then UTF-8 name
        u32       ndim, then ndim * i64 dims
        data      float64 little-endian, C order

Parameter order is sorted by name, so identical state produces identical
bytes.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .tensor import Tensor

MAGIC = b"FFCKPT01"


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(path, tensors: dict, config_text: str, fingerprint: str) -> None:
    chunks = [MAGIC]
    fp = fingerprint.encode("ascii")
    cfg = config_text.encode("utf-8")
    chunks.append(struct.pack("<I", len(fp)))
    chunks.append(fp)
    chunks.append(struct.pack("<I", len(cfg)))
    chunks.append(cfg)
    names = sorted(tensors)
    chunks.append(struct.pack("<I", len(names)))
    for name in names:
        t = tensors[name]
        arr = np.ascontiguousarray(t.values if isinstance(t, Tensor) else t, dtype=np.float64)
        nb = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(nb)))
        chunks.append(nb)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}q", *arr.shape))
        chunks.append(arr.astype("<f8").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], str, str]:
    """Returns (tensors, config_text, fingerprint)."""
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    off = 8

    def read_u32() -> int:
        nonlocal off
        (val,) = struct.unpack_from("<I", data, off)
        off += 4
        return val

    def read_bytes(n: int) -> bytes:
        nonlocal off
        chunk = data[off : off + n]
        if len(chunk) != n:
            raise CheckpointError(f"{path}: truncated checkpoint")
        off += n
        return chunk

    fingerprint = read_bytes(read_u32()).decode("ascii")
    config_text = read_bytes(read_u32()).decode("utf-8")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(read_u32()):
        name = read_bytes(read_u32()).decode("utf-8")
        ndim = read_u32()
        dims = struct.unpack_from(f"<{ndim}q", data, off)
        off += 8 * ndim
        count = int(np.prod(dims)) if ndim else 1
        arr = np.frombuffer(read_bytes(8 * count), dtype="<f8").reshape(dims)
        tensors[name] = arr.astype(np.float64)
    return tensors, config_text, fingerprint
