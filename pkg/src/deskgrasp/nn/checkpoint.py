"""UGNN checkpoint format.

Layout (little-endian): magic "UGNN", version u16, then repeated
(name-length u16, name bytes, rank u8, shape u32 per dim, f32 data).
Entry order is preserved, so writes are byte-deterministic.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"UGNN"
VERSION = 1


class CheckpointFormatError(ValueError):
    """Raised for bad magic, version, or truncated checkpoint files."""


def write_checkpoint(path: str | Path, arrays: dict[str, np.ndarray]) -> None:
    chunks = [MAGIC, struct.pack("<H", VERSION)]
    for name, value in arrays.items():
        data = np.ascontiguousarray(np.asarray(value), dtype="<f4")
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<B", data.ndim))
        chunks.append(struct.pack(f"<{data.ndim}I", *data.shape))
        chunks.append(data.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def read_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    blob = Path(path).read_bytes()
    if blob[:4] != MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic {blob[:4]!r}")
    (version,) = struct.unpack_from("<H", blob, 4)
    if version != VERSION:
        raise CheckpointFormatError(f"{path}: unsupported version {version}")
    offset = 6
    out: dict[str, np.ndarray] = {}
    try:
        while offset < len(blob):
            (name_len,) = struct.unpack_from("<H", blob, offset)
            offset += 2
            name = blob[offset : offset + name_len].decode("utf-8")
            if len(blob) < offset + name_len:
                raise CheckpointFormatError(f"{path}: truncated name")
            offset += name_len
            (rank,) = struct.unpack_from("<B", blob, offset)
            offset += 1
            shape = struct.unpack_from(f"<{rank}I", blob, offset)
            offset += 4 * rank
            count = int(np.prod(shape, dtype=np.int64)) if rank else 1
            end = offset + 4 * count
            if end > len(blob):
                raise CheckpointFormatError(f"{path}: truncated data for {name!r}")
            out[name] = np.frombuffer(blob[offset:end], dtype="<f4").reshape(shape).copy()
            offset = end
    except struct.error as exc:
        raise CheckpointFormatError(f"{path}: truncated header ({exc})") from exc
    return out
