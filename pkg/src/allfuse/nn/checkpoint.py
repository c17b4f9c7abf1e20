"""AFCK binary checkpoints: named float32 tensors, little-endian.

Layout: ``b"AFCK"``, u32 version, u32 n_tensors, then for each tensor
u32 name_len, UTF-8 name, u32 rank, rank x u32 dims, float32 payload (row-major).
Tensors are written in sorted-name order so identical weights give identical bytes.
"""

import struct

import numpy as np

from ..errors import DecodeError

MAGIC = b"AFCK"
VERSION = 1


def dumps(tensors: dict) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name in sorted(tensors):
        arr = np.asarray(getattr(tensors[name], "data", tensors[name]))
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def loads(blob: bytes, source="<bytes>") -> dict:
    def fail(msg):
        raise DecodeError(f"{source}: {msg}")

    if blob[:4] != MAGIC:
        fail("not an AFCK checkpoint (bad magic)")
    if len(blob) < 12:
        fail("truncated header")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        fail(f"unsupported checkpoint version {version}")
    off = 12
    out = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", blob, off)
            off += 4
            name = blob[off:off + nlen].decode("utf-8")
            off += nlen
            (rank,) = struct.unpack_from("<I", blob, off)
            off += 4
            shape = struct.unpack_from(f"<{rank}I", blob, off)
            off += 4 * rank
            size = int(np.prod(shape, dtype=np.int64))
            if off + 4 * size > len(blob):
                fail(f"tensor {name!r} payload truncated")
            out[name] = np.frombuffer(blob, dtype="<f4", count=size, offset=off).reshape(shape).astype(np.float32)
            off += 4 * size
    except struct.error as exc:
        fail(f"truncated checkpoint ({exc})")
    if off != len(blob):
        fail("trailing bytes after last tensor")
    return out


def save(path, tensors: dict):
    with open(path, "wb") as fh:
        fh.write(dumps(tensors))


def load(path) -> dict:
    with open(path, "rb") as fh:
        return loads(fh.read(), source=str(path))
