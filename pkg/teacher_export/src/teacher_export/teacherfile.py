"""TeacherFile binary format and content-hash image ids.

This mirrors the cross-component contract byte for byte: magic ``HUVRTEAC``,
version 1, little-endian counts, then per image a 32-byte sha256 id, the
global feature vector, and the patch feature matrix, all float32.
Image ids are sha256 over the decoded (H, W, 3) uint8 pixels in C order, so
the id depends only on content, never on file paths.
"""

from __future__ import annotations

import hashlib
import os
import struct

import numpy as np

TEACHER_MAGIC = b"HUVRTEAC"


class TeacherFileError(ValueError):
    pass


def content_id(rgb_u8: np.ndarray) -> str:
    if rgb_u8.dtype != np.uint8 or rgb_u8.ndim != 3 or rgb_u8.shape[2] != 3:
        raise TeacherFileError(f"content_id expects (H, W, 3) uint8, got "
                               f"{rgb_u8.shape} {rgb_u8.dtype}")
    return hashlib.sha256(np.ascontiguousarray(rgb_u8).tobytes()).hexdigest()


def write_teacher_file(path, records: dict, P: int, teacher_dim: int) -> None:
    """records: hex image id -> (global [dim], patches [P, dim]). Atomic."""
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as f:
        f.write(TEACHER_MAGIC)
        f.write(struct.pack("<I", 1))
        f.write(struct.pack("<III", len(records), P, teacher_dim))
        for img_id in sorted(records):
            g, p = records[img_id]
            if g.shape != (teacher_dim,):
                raise TeacherFileError(f"global dim {g.shape} != {teacher_dim}")
            if p.shape != (P, teacher_dim):
                raise TeacherFileError(f"patch dims {p.shape} != ({P}, {teacher_dim})")
            f.write(bytes.fromhex(img_id))
            f.write(np.ascontiguousarray(g, dtype="<f4").tobytes())
            f.write(np.ascontiguousarray(p, dtype="<f4").tobytes())
    os.replace(tmp, path)


def read_teacher_file(path) -> tuple[dict, int, int]:
    with open(path, "rb") as f:
        data = f.read()
    if data[:8] != TEACHER_MAGIC:
        raise TeacherFileError("bad magic")
    (version,) = struct.unpack_from("<I", data, 8)
    if version != 1:
        raise TeacherFileError(f"unsupported version {version}")
    count, P, teacher_dim = struct.unpack_from("<III", data, 12)
    off = 24
    rec_size = 32 + 4 * teacher_dim + 4 * P * teacher_dim
    if len(data) - off != count * rec_size:
        raise TeacherFileError("record count mismatch")
    records = {}
    for _ in range(count):
        img_id = data[off:off + 32].hex()
        off += 32
        g = np.frombuffer(data, dtype="<f4", count=teacher_dim, offset=off).copy()
        off += 4 * teacher_dim
        p = np.frombuffer(data, dtype="<f4", count=P * teacher_dim,
                          offset=off).reshape(P, teacher_dim).copy()
        off += 4 * P * teacher_dim
        records[img_id] = (g, p)
    return records, P, teacher_dim
