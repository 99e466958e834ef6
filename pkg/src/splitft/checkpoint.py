"""Binary parameter checkpoints.

Layout (little-endian): ``b"SFTW"``, version ``u16``, then one record per
parameter until end of file: name length ``u16``, UTF-8 name, rows ``u32``,
cols ``u32``, ``rows*cols`` float32 values.  Vectors are stored as ``1 x n``.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"SFTW"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, state: dict[str, np.ndarray]) -> None:
    parts = [MAGIC, struct.pack("<H", VERSION)]
    for name, value in state.items():
        arr = np.asarray(value, dtype="<f4")
        if arr.ndim == 1:
            arr = arr.reshape(1, -1)
        if arr.ndim != 2:
            raise CheckpointError(f"{name}: only 1-D/2-D parameters supported, got {arr.shape}")
        raw = name.encode()
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<II", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    """Read a checkpoint; every entry comes back as a 2-D float32 array."""
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {buf[:4]!r}")
    if len(buf) < 6:
        raise CheckpointError(f"{path}: truncated header")
    (version,) = struct.unpack_from("<H", buf, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    pos = 6
    state = {}
    try:
        while pos < len(buf):
            (n,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            name = buf[pos : pos + n].decode()
            pos += n
            rows, cols = struct.unpack_from("<II", buf, pos)
            pos += 8
            nbytes = rows * cols * 4
            if pos + nbytes > len(buf):
                raise CheckpointError(f"{path}: truncated payload for {name}")
            state[name] = np.frombuffer(buf, dtype="<f4", count=rows * cols, offset=pos).reshape(rows, cols).astype(np.float32)
            pos += nbytes
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated record") from exc
    return state
