"""Precomputed teacher features on disk (MRTF files).

Layout (little-endian):

    magic   4 bytes  b"MRTF"
    version u32      currently 1
    count   u32      number of records
    record: image id u64, n u32, dim u32,
            features  n*dim float32 row-major,
            saliency  n float32

Export-then-load round-trips bitwise, which is what lets a file-backed
teacher reproduce an in-process teacher's training trajectory exactly.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .vit import TeacherError, TeacherSignal

MAGIC = b"MRTF"
VERSION = 1


class FeatureFileError(RuntimeError):
    pass


def write_features(path, records: dict[int, TeacherSignal]) -> None:
    """Write image-id -> signal records, sorted by id for stable bytes."""
    out = bytearray()
    out += MAGIC
    out += struct.pack("<I", VERSION)
    out += struct.pack("<I", len(records))
    dim = None
    for image_id in sorted(records):
        sig = records[image_id]
        n, d = sig.features.shape
        if dim is None:
            dim = d
        elif d != dim:
            raise FeatureFileError(f"record {image_id}: feature dim {d} drifted "
                                   f"from {dim}")
        out += struct.pack("<QII", image_id, n, d)
        out += np.ascontiguousarray(sig.features, dtype="<f4").tobytes()
        out += np.ascontiguousarray(sig.saliency, dtype="<f4").tobytes()
    Path(path).write_bytes(bytes(out))


def read_features(path) -> dict[int, TeacherSignal]:
    buf = Path(path).read_bytes()
    view = memoryview(buf)
    pos = 0

    def take(nbytes, what):
        nonlocal pos
        if pos + nbytes > len(buf):
            raise FeatureFileError(f"{path}: truncated while reading {what}")
        chunk = view[pos:pos + nbytes]
        pos += nbytes
        return chunk

    if bytes(take(4, "magic")) != MAGIC:
        raise FeatureFileError(f"{path}: bad magic, not a feature file")
    (version,) = struct.unpack("<I", take(4, "version"))
    if version != VERSION:
        raise FeatureFileError(f"{path}: unsupported version {version}")
    (count,) = struct.unpack("<I", take(4, "record count"))
    records: dict[int, TeacherSignal] = {}
    for i in range(count):
        image_id, n, dim = struct.unpack("<QII", take(16, f"record {i} header"))
        feats = np.frombuffer(take(4 * n * dim, f"record {i} features"),
                              dtype="<f4").reshape(n, dim)
        sal = np.frombuffer(take(4 * n, f"record {i} saliency"), dtype="<f4")
        records[image_id] = TeacherSignal(features=np.array(feats),
                                          saliency=np.array(sal))
    if pos != len(buf):
        raise FeatureFileError(f"{path}: {len(buf) - pos} trailing bytes")
    return records


def export_features(image_ids, images, teacher, path) -> None:
    """Run the teacher over a dataset and persist every signal."""
    records = {}
    for image_id, image in zip(image_ids, images):
        records[int(image_id)] = teacher.signal_for(int(image_id), image)
    write_features(path, records)


class FileTeacher:
    """Teacher interface backed by a precomputed MRTF file."""

    def __init__(self, path):
        self.records = read_features(path)
        dims = {sig.features.shape for sig in self.records.values()}
        if len(dims) > 1:
            raise FeatureFileError(f"{path}: inconsistent record shapes {dims}")
        self._shape = dims.pop() if dims else (0, 0)

    @property
    def feature_dim(self) -> int:
        return self._shape[1]

    @property
    def frozen(self) -> bool:
        return True

    def signal_for(self, image_id, image=None) -> TeacherSignal:
        if image_id not in self.records:
            raise TeacherError(f"no precomputed features for image {image_id}")
        return self.records[image_id]
