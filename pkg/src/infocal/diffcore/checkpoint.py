"""Binary checkpoint format.

Layout: ``b"ICAL"`` + version byte ``0x01``, then one record per tensor::

    name_len: u32 LE | name: UTF-8 | rank: u32 LE | dims: u32 LE * rank | payload: f32 LE row-major

Records are written in the order given, so saving a dict produces a
reproducible byte stream.
"""

from __future__ import annotations

import os
import struct
from typing import Mapping

import numpy as np

MAGIC = b"ICAL"
VERSION = 1


class CheckpointError(ValueError):
    pass


def dumps(tensors: Mapping[str, np.ndarray]) -> bytes:
    chunks = [MAGIC, bytes([VERSION])]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(chunks)


def loads(blob: bytes) -> dict[str, np.ndarray]:
    if blob[:4] != MAGIC:
        raise CheckpointError("not an ICAL checkpoint (bad magic)")
    if len(blob) < 5 or blob[4] != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {blob[4] if len(blob) > 4 else None}")
    out: dict[str, np.ndarray] = {}
    pos = 5
    try:
        while pos < len(blob):
            (n,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos: pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}I", blob, pos)
            pos += 4 * rank
            count = int(np.prod(dims)) if rank else 1
            payload = blob[pos: pos + 4 * count]
            if len(payload) != 4 * count:
                raise CheckpointError(f"truncated payload for {name!r}")
            out[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)
            pos += 4 * count
    except struct.error as exc:
        raise CheckpointError(f"truncated checkpoint: {exc}") from None
    return out


def save(path: str | os.PathLike, tensors: Mapping[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps(tensors))


def load(path: str | os.PathLike) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        return loads(fh.read())
