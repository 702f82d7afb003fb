"""Binary container files for checkpoints and datasets.

Layout (all integers little-endian)::

    magic      4 bytes   b"GSWT" (weights) or b"GSDS" (dataset)
    version    u8
    repeated until EOF:
        name_len   u32
        name       name_len bytes, utf-8
        rank       u32
        dims       rank x u32
        payload    prod(dims) x float32 (little-endian, row-major)
"""

from __future__ import annotations

import hashlib
import io
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

CHECKPOINT_MAGIC = b"GSWT"
DATASET_MAGIC = b"GSDS"
VERSION = 1

_F32 = np.dtype("<f4")


class FormatError(ValueError):
    """A container file is malformed or has an unexpected magic/version."""


def encode_container(arrays: Mapping[str, np.ndarray], magic: bytes = CHECKPOINT_MAGIC) -> bytes:
    if len(magic) != 4:
        raise ValueError("magic must be exactly 4 bytes")
    buf = io.BytesIO()
    buf.write(magic)
    buf.write(struct.pack("<B", VERSION))
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype=_F32)
        raw_name = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw_name)))
        buf.write(raw_name)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes(order="C"))
    return buf.getvalue()


def decode_container(blob: bytes, magic: bytes = CHECKPOINT_MAGIC) -> dict[str, np.ndarray]:
    if blob[:4] != magic:
        raise FormatError(f"bad magic {blob[:4]!r}, expected {magic!r}")
    if len(blob) < 5 or blob[4] != VERSION:
        raise FormatError(f"unsupported version {blob[4] if len(blob) > 4 else None}")
    out: dict[str, np.ndarray] = {}
    pos = 5
    try:
        while pos < len(blob):
            (name_len,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos:pos + name_len].decode("utf-8")
            pos += name_len
            (rank,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}I", blob, pos)
            pos += 4 * rank
            count = int(np.prod(dims, dtype=np.int64)) if rank else 1
            nbytes = 4 * count
            if pos + nbytes > len(blob):
                raise FormatError(f"truncated payload for {name!r}")
            out[name] = np.frombuffer(blob, dtype=_F32, count=count, offset=pos).reshape(dims).copy()
            pos += nbytes
    except struct.error as exc:
        raise FormatError(f"truncated record header: {exc}") from None
    return out


def write_container(path, arrays: Mapping[str, np.ndarray], magic: bytes = CHECKPOINT_MAGIC) -> None:
    Path(path).write_bytes(encode_container(arrays, magic))


def read_container(path, magic: bytes = CHECKPOINT_MAGIC) -> dict[str, np.ndarray]:
    return decode_container(Path(path).read_bytes(), magic)


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
