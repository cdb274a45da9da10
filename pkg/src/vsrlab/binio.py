"""Low-level helpers for the little-endian binary container formats.

Every on-disk container starts with a 4-byte magic, followed by fixed-width
integers (u8/u32) and packed numpy arrays. All multi-byte values are
little-endian regardless of host byte order.
"""

import struct

import numpy as np

from .errors import FormatError


def read_exact(fh, n, path):
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError(f"{path}: truncated file (wanted {n} bytes, got {len(buf)})")
    return buf


def check_magic(fh, magic, path):
    got = fh.read(len(magic))
    if got != magic:
        raise FormatError(f"{path}: bad magic {got!r}, expected {magic!r}")


def write_u8(fh, value):
    fh.write(struct.pack("<B", value))


def read_u8(fh, path):
    return struct.unpack("<B", read_exact(fh, 1, path))[0]


def write_u32(fh, value):
    fh.write(struct.pack("<I", value))


def read_u32(fh, path):
    return struct.unpack("<I", read_exact(fh, 4, path))[0]


def write_f64(fh, value):
    fh.write(struct.pack("<d", value))


def read_f64(fh, path):
    return struct.unpack("<d", read_exact(fh, 8, path))[0]


def write_str8(fh, text):
    data = text.encode("utf-8")
    if len(data) > 255:
        raise FormatError(f"string too long for u8 length prefix: {text!r}")
    write_u8(fh, len(data))
    fh.write(data)


def read_str8(fh, path):
    n = read_u8(fh, path)
    return read_exact(fh, n, path).decode("utf-8")


def write_array(fh, arr, dtype):
    fh.write(np.ascontiguousarray(arr, dtype=dtype).tobytes())


def read_array(fh, dtype, shape, path):
    dt = np.dtype(dtype)
    count = int(np.prod(shape)) if shape else 1
    buf = read_exact(fh, dt.itemsize * count, path)
    return np.frombuffer(buf, dtype=dt).reshape(shape).copy()
