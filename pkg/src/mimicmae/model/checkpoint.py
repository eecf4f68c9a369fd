"""Binary checkpoint container.

Layout (all integers little-endian):

    magic   4 bytes  b"MRMC"
    version u32      currently 1
    digest  u32 length + that many raw bytes (config content digest)
    count   u32      number of records
    record: name u32 length + utf-8 bytes
            rank u32, then rank u32 dims
            float32 little-endian values, row-major

Values are stored exactly as float32, so save/load round-trips bit-exactly.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"MRMC"
VERSION = 1


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(path, digest: bytes, arrays: dict) -> None:
    """Write named float32 arrays; insertion order is preserved."""
    out = bytearray()
    out += MAGIC
    out += struct.pack("<I", VERSION)
    out += struct.pack("<I", len(digest)) + bytes(digest)
    out += struct.pack("<I", len(arrays))
    for name, arr in arrays.items():
        a = np.asarray(arr)
        if a.dtype != np.float32:
            raise CheckpointError(f"record {name!r} must be float32, got {a.dtype}")
        nb = name.encode("utf-8")
        out += struct.pack("<I", len(nb)) + nb
        out += struct.pack("<I", a.ndim)
        out += struct.pack(f"<{a.ndim}I", *a.shape) if a.ndim else b""
        out += np.ascontiguousarray(a).astype("<f4").tobytes()
    Path(path).write_bytes(bytes(out))


def load_checkpoint(path):
    """Read (digest, dict name -> float32 array); validates magic/version."""
    buf = Path(path).read_bytes()
    view = memoryview(buf)
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError(f"truncated checkpoint while reading {what}")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(4, "magic")) != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a checkpoint file")
    (version,) = struct.unpack("<I", take(4, "version"))
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    (dlen,) = struct.unpack("<I", take(4, "digest length"))
    digest = bytes(take(dlen, "digest"))
    (count,) = struct.unpack("<I", take(4, "record count"))
    arrays = {}
    for i in range(count):
        (nlen,) = struct.unpack("<I", take(4, f"record {i} name length"))
        name = bytes(take(nlen, f"record {i} name")).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4, f"record {i} rank"))
        shape = struct.unpack(f"<{rank}I", take(4 * rank, f"record {i} dims")) \
            if rank else ()
        size = int(np.prod(shape, dtype=np.int64)) if rank else 1
        data = np.frombuffer(take(4 * size, f"record {i} ({name}) data"),
                             dtype="<f4").reshape(shape)
        # frombuffer views are read-only; callers mutate params in place.
        arrays[name] = np.array(data) if rank else np.array(data.reshape(()))
    if pos != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - pos} trailing bytes")
    return digest, arrays
