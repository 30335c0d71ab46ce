"""Binary container for named arrays (checkpoints and precomputed features).

Layout, all little-endian::

    b"PDSC" | version u32 | entry count u32
    per entry: name length u16 | UTF-8 name | dtype tag u8 | rank u8 | dims u64 * rank | raw data
    CRC32 (u32) of every preceding byte
"""
import json
import os
import struct
import zlib
from typing import Dict

import numpy as np

from .errors import ChecksumError, FormatError, VersionError

MAGIC = b"PDSC"
VERSION = 1
_TAGS = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}
_TAG_OF = {np.dtype("float32"): 0, np.dtype("float64"): 1, np.dtype("int64"): 2}


def encode(arrays: Dict[str, np.ndarray]) -> bytes:
    out = [MAGIC, struct.pack("<II", VERSION, len(arrays))]
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        if arr.dtype not in _TAG_OF:
            if np.issubdtype(arr.dtype, np.integer) or arr.dtype == np.bool_:
                arr = arr.astype(np.int64)
            else:
                raise FormatError(f"unsupported dtype {arr.dtype} for entry '{name}'")
        tag = _TAG_OF[arr.dtype]
        raw_name = name.encode("utf-8")
        if len(raw_name) > 0xFFFF or arr.ndim > 0xFF:
            raise FormatError(f"entry '{name}' name or rank too large")
        out.append(struct.pack("<H", len(raw_name)))
        out.append(raw_name)
        out.append(struct.pack("<BB", tag, arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype=_TAGS[tag]).tobytes())
    body = b"".join(out)
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, buf, path):
        self.buf, self.pos, self.path = buf, 0, path

    def take(self, n, what):
        end = self.pos + n
        if end > len(self.buf):
            raise FormatError(f"truncated container while reading {what}", self.path, self.pos)
        chunk = self.buf[self.pos:end]
        self.pos = end
        return chunk

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode(buf: bytes, path=None) -> Dict[str, np.ndarray]:
    if len(buf) < 16:
        raise FormatError("container too short", path, len(buf))
    if buf[:4] != MAGIC:
        raise FormatError(f"bad magic {buf[:4]!r}", path, 0)
    body, (crc,) = buf[:-4], struct.unpack("<I", buf[-4:])
    version = struct.unpack("<I", buf[4:8])[0]
    if version != VERSION:
        raise VersionError(f"unsupported container format version {version} (expected {VERSION})", path, 4)
    if zlib.crc32(body) != crc:
        raise ChecksumError("CRC32 checksum mismatch", path, len(body))
    r = _Reader(body, path)
    r.pos = 8
    (count,) = r.unpack("<I", "entry count")
    arrays = {}
    for _ in range(count):
        start = r.pos
        (n,) = r.unpack("<H", "name length")
        try:
            name = r.take(n, "name").decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("entry name is not valid UTF-8", path, start) from None
        tag, rank = r.unpack("<BB", "dtype tag")
        if tag not in _TAGS:
            raise FormatError(f"unknown dtype tag {tag} for entry '{name}'", path, r.pos - 2)
        dims = r.unpack(f"<{rank}Q", "dims")
        dtype = _TAGS[tag]
        nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
        data = r.take(nbytes, f"data of '{name}'")
        arrays[name] = np.frombuffer(data, dtype=dtype).reshape(dims).copy()
    if r.pos != len(body):
        raise FormatError("trailing bytes after last entry", path, r.pos)
    return arrays


def save(path, arrays):
    """Write atomically: a partial file is never left under ``path``."""
    data = encode(arrays)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)


def load(path):
    try:
        with open(path, "rb") as f:
            buf = f.read()
    except FileNotFoundError:
        raise FileNotFoundError(f"container not found: {path}") from None
    return decode(buf, path)


def pack_json(obj) -> np.ndarray:
    """Metadata is stored as an int64 array of UTF-8 byte values."""
    raw = json.dumps(obj, sort_keys=True).encode("utf-8")
    return np.frombuffer(raw, dtype=np.uint8).astype(np.int64)


def unpack_json(arr: np.ndarray):
    return json.loads(np.asarray(arr).astype(np.uint8).tobytes().decode("utf-8"))
