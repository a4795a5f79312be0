"""ATOC container: named little-endian arrays.

Layout: ``b"ATOC"``, version u32, entry count u32, then per entry a u16 name
length, the UTF-8 name, dtype code u8 (0 f64, 1 f32, 2 u8), ndim u8, ndim u64
dims and the raw payload.  Storing f64 data as f32 is lossy.
"""
import io
import struct

import numpy as np

MAGIC = b"ATOC"
VERSION = 1
_CODES = {0: np.dtype("<f8"), 1: np.dtype("<f4"), 2: np.dtype("u1")}
_BY_DTYPE = {v: k for k, v in _CODES.items()}


class CheckpointError(ValueError):
    pass


def dumps(arrays):
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(arrays)))
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<") if arr.dtype.itemsize > 1 else arr.dtype
        if dt not in _BY_DTYPE:
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        encoded = name.encode("utf-8")
        buf.write(struct.pack("<H", len(encoded)))
        buf.write(encoded)
        buf.write(struct.pack("<BB", _BY_DTYPE[dt], arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype=dt).tobytes())
    return buf.getvalue()


def loads(raw):
    if raw[:4] != MAGIC:
        raise CheckpointError("not an ATOC container")
    version, count = struct.unpack_from("<II", raw, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported container version {version}")
    pos, out = 12, {}
    for _ in range(count):
        (n,) = struct.unpack_from("<H", raw, pos)
        pos += 2
        name = raw[pos:pos + n].decode("utf-8")
        pos += n
        code, ndim = struct.unpack_from("<BB", raw, pos)
        pos += 2
        dims = struct.unpack_from(f"<{ndim}Q", raw, pos)
        pos += 8 * ndim
        dt = _CODES.get(code)
        if dt is None:
            raise CheckpointError(f"{name}: unknown dtype code {code}")
        size = int(np.prod(dims)) * dt.itemsize
        if pos + size > len(raw):
            raise CheckpointError(f"{name}: truncated payload")
        out[name] = np.frombuffer(raw[pos:pos + size], dtype=dt).reshape(dims).copy()
        pos += size
    return out


def save(path, arrays):
    with open(path, "wb") as fh:
        fh.write(dumps(arrays))


def load(path):
    with open(path, "rb") as fh:
        return loads(fh.read())


def encode_text(text):
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).copy()


def decode_text(arr):
    return bytes(np.asarray(arr, dtype=np.uint8)).decode("utf-8")
