"""Binary tensor format and parameter bundles.

Tensor layout (all integers little-endian)::

    b"DRCP" | u16 version (=1) | u8 dtype (0 = f32) | u8 ndim | ndim x u32 dims | payload

Bundles hold named tensors::

    b"DRCB" | u16 version (=1) | u32 count | count x (u16 name_len | name | u64 size | tensor)
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .validation import FormatError

MAGIC = b"DRCP"
BUNDLE_MAGIC = b"DRCB"
VERSION = 1
DTYPE_F32 = 0
MAX_ELEMENTS = 1 << 31


def encode_tensor(arr):
    arr = np.asarray(arr)
    if arr.dtype != np.float32:
        arr = arr.astype(np.float32)
    if arr.ndim == 0 or arr.ndim > 255 or 0 in arr.shape:
        raise FormatError(f"cannot encode tensor of shape {arr.shape}")
    header = MAGIC + struct.pack("<HBB", VERSION, DTYPE_F32, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + arr.astype("<f4").tobytes(order="C")


def decode_tensor(buf):
    """Inverse of :func:`encode_tensor`; returns (array, bytes consumed)."""
    buf = memoryview(bytes(buf))
    if len(buf) < 8:
        raise FormatError("truncated header")
    if bytes(buf[:4]) != MAGIC:
        raise FormatError(f"bad magic {bytes(buf[:4])!r}")
    version, dtype, ndim = struct.unpack_from("<HBB", buf, 4)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")
    if dtype != DTYPE_F32:
        raise FormatError(f"unsupported dtype tag {dtype}")
    if ndim == 0:
        raise FormatError("tensor has no dimensions")
    off = 8
    if len(buf) < off + 4 * ndim:
        raise FormatError("truncated dims")
    dims = struct.unpack_from(f"<{ndim}I", buf, off)
    off += 4 * ndim
    if 0 in dims:
        raise FormatError("tensor has an empty dimension")
    count = 1
    for d in dims:
        count *= d
        if count > MAX_ELEMENTS:
            raise FormatError("dimension product overflows element limit")
    nbytes = 4 * count
    if len(buf) < off + nbytes:
        raise FormatError(f"truncated payload: need {nbytes} bytes, have {len(buf) - off}")
    arr = np.frombuffer(buf[off:off + nbytes], dtype="<f4").astype(np.float32).reshape(dims)
    return arr, off + nbytes


def save_tensor(path, arr):
    Path(path).write_bytes(encode_tensor(arr))


def load_tensor(path):
    data = Path(path).read_bytes()
    arr, used = decode_tensor(data)
    if used != len(data):
        raise FormatError(f"{len(data) - used} trailing bytes after tensor")
    return arr


def encode_bundle(tensors):
    parts = [BUNDLE_MAGIC, struct.pack("<HI", VERSION, len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        blob = encode_tensor(arr)
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<Q", len(blob)) + blob)
    return b"".join(parts)


def decode_bundle(buf):
    buf = bytes(buf)
    if len(buf) < 10 or buf[:4] != BUNDLE_MAGIC:
        raise FormatError("bad bundle magic")
    version, count = struct.unpack_from("<HI", buf, 4)
    if version != VERSION:
        raise FormatError(f"unsupported bundle version {version}")
    off = 10
    out = {}
    for _ in range(count):
        if len(buf) < off + 2:
            raise FormatError("truncated bundle entry")
        (nlen,) = struct.unpack_from("<H", buf, off)
        off += 2
        name = buf[off:off + nlen].decode("utf-8")
        off += nlen
        if len(buf) < off + 8:
            raise FormatError("truncated bundle entry")
        (size,) = struct.unpack_from("<Q", buf, off)
        off += 8
        arr, used = decode_tensor(buf[off:off + size])
        if used != size:
            raise FormatError(f"entry {name!r} size mismatch")
        out[name] = arr
        off += size
    return out


def save_bundle(path, tensors):
    Path(path).write_bytes(encode_bundle(tensors))


def load_bundle(path):
    return decode_bundle(Path(path).read_bytes())
