"""Binary checkpoint container.

Layout (little-endian)::

    b"DRFT" | u32 version | u32 count
    per entry: u32 name_len | utf-8 name | u32 rank | rank * u64 extents | f32 values
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"DRFT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def dumps(state: dict[str, np.ndarray]) -> bytes:
    out = [MAGIC, struct.pack("<II", VERSION, len(state))]
    for name, arr in state.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        out.append(struct.pack("<I", len(raw)))
        out.append(raw)
        out.append(struct.pack("<I", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(out)


def loads(buf: bytes) -> dict[str, np.ndarray]:
    if buf[:4] != MAGIC:
        raise CheckpointError("bad magic")
    if len(buf) < 12:
        raise CheckpointError("truncated checkpoint")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 12
    state: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos:pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            shape = struct.unpack_from(f"<{rank}Q", buf, pos)
            pos += 8 * rank
            size = int(np.prod(shape)) if rank else 1
            if pos + 4 * size > len(buf):
                raise CheckpointError("truncated checkpoint")
            state[name] = np.frombuffer(buf, dtype="<f4", count=size, offset=pos).reshape(shape).copy()
            pos += 4 * size
    except struct.error as exc:
        raise CheckpointError("truncated checkpoint") from exc
    return state


def save(path, state: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps(state))


def load(path) -> dict[str, np.ndarray]:
    return loads(Path(path).read_bytes())
