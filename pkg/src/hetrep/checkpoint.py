"""Named-tensor archive used for model checkpoints.

Layout (little-endian)::

    magic "OSCK" | version u16 | meta length u32 | meta (UTF-8 JSON)
    tensor count u32
    per tensor: name length u16 | name | dtype code u8 | ndim u8 | shape u64 x ndim | payload
    crc32 u32 over every preceding byte

Tensors are written in sorted name order so equal contents give equal bytes.
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import IntegrityError, ValidationError

MAGIC = b"OSCK"
VERSION = 1

_DTYPES = {0: "<f4", 1: "<f8", 2: "<u8", 3: "<i8", 4: "<u4", 5: "u1"}
_CODES = {np.dtype(v): k for k, v in _DTYPES.items()}


def encode_archive(tensors: Mapping[str, np.ndarray], meta: Mapping) -> bytes:
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<HI", VERSION, len(meta_bytes)), meta_bytes, struct.pack("<I", len(tensors))]
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        code = _CODES.get(arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype)
        if code is None:
            raise ValidationError(f"tensor {name!r}: unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<BB", code, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def decode_archive(buf: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if len(buf) < 14 or buf[:4] != MAGIC:
        raise IntegrityError("not an OSCK archive")
    (crc,) = struct.unpack_from("<I", buf, len(buf) - 4)
    if zlib.crc32(buf[:-4]) != crc:
        raise IntegrityError("checkpoint checksum mismatch")
    version, meta_len = struct.unpack_from("<HI", buf, 4)
    if version != VERSION:
        raise IntegrityError(f"unsupported checkpoint version {version}")
    pos = 10
    meta = json.loads(buf[pos:pos + meta_len].decode("utf-8"))
    pos += meta_len
    (count,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = buf[pos:pos + nlen].decode("utf-8")
        pos += nlen
        code, ndim = struct.unpack_from("<BB", buf, pos)
        pos += 2
        shape = struct.unpack_from(f"<{ndim}Q", buf, pos)
        pos += 8 * ndim
        dtype = np.dtype(_DTYPES[code])
        n = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        tensors[name] = np.frombuffer(buf[pos:pos + n], dtype=dtype).reshape(shape).copy()
        pos += n
    return tensors, meta


def save_archive(path: str | Path, tensors: Mapping[str, np.ndarray], meta: Mapping) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_archive(tensors, meta))
    os.replace(tmp, path)


def load_archive(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    return decode_archive(Path(path).read_bytes())
