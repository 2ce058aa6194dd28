"""AFCK binary checkpoints: a JSON config blob plus named float32 tensor records.

Layout, all little-endian: magic "AFCK" | version u32 | config length u32 |
config UTF-8 JSON | records.  Each record is name length u32 | name bytes |
rank u32 | extents u32 each | float32 payload.  Records are written in
sorted-name order so identical state produces identical bytes.  Loading
casts payloads to float64; callers that need bitwise save/resume parity
should round their live float64 state through float32 at save time
(round_trip_f32) so memory and disk agree exactly.
"""

from __future__ import annotations

import json
import os
import struct

import numpy as np

from .errors import CheckpointError

AFCK_MAGIC = b"AFCK"
AFCK_VERSION = 1


def round_trip_f32(a: np.ndarray) -> np.ndarray:
    """Quantize float64 state to what an AFCK record preserves."""
    return np.asarray(a).astype("<f4").astype(np.float64)


def save_checkpoint(path, tensors: dict, config: dict) -> None:
    blob = json.dumps(config, sort_keys=True).encode("utf-8")
    parts = [struct.pack("<4sII", AFCK_MAGIC, AFCK_VERSION, len(blob)), blob]
    for name in sorted(tensors):
        arr = np.ascontiguousarray(np.asarray(tensors[name]), dtype="<f4")
        nb = name.encode("utf-8")
        parts.append(struct.pack("<I", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<I", arr.ndim))
        if arr.ndim:
            parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(b"".join(parts))
    os.replace(tmp, path)  # keep the previous checkpoint intact on failure


class _Cursor:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.off = 0

    def take(self, n: int, what: str) -> bytes:
        if self.off + n > len(self.raw):
            raise CheckpointError(
                f"truncated checkpoint reading {what}: need {self.off + n} bytes, have {len(self.raw)}"
            )
        out = self.raw[self.off:self.off + n]
        self.off += n
        return out

    @property
    def done(self) -> bool:
        return self.off == len(self.raw)


def load_checkpoint(path):
    """Returns (tensors: name -> float64 array, config: dict)."""
    with open(path, "rb") as f:
        cur = _Cursor(f.read())
    magic, version, blob_len = struct.unpack("<4sII", cur.take(12, "header"))
    if magic != AFCK_MAGIC:
        raise CheckpointError(f"bad magic {magic!r}, expected {AFCK_MAGIC!r}")
    if version != AFCK_VERSION:
        raise CheckpointError(f"unsupported version {version}, expected {AFCK_VERSION}")
    try:
        config = json.loads(cur.take(blob_len, "config blob").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"config blob is not valid JSON: {e}") from None
    tensors: dict[str, np.ndarray] = {}
    while not cur.done:
        (name_len,) = struct.unpack("<I", cur.take(4, "record name length"))
        name = cur.take(name_len, "record name").decode("utf-8")
        if name in tensors:
            raise CheckpointError(f"duplicate tensor record '{name}'")
        (rank,) = struct.unpack("<I", cur.take(4, f"rank of '{name}'"))
        shape = struct.unpack(f"<{rank}I", cur.take(4 * rank, f"extents of '{name}'")) if rank else ()
        count = int(np.prod(shape, dtype=np.int64)) if rank else 1
        payload = cur.take(4 * count, f"payload of '{name}'")
        tensors[name] = np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float64)
    return tensors, config
