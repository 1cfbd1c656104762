"""TSR1 tensor blobs and PIDCKPT1 checkpoint archives.

TSR1:     b"TSR1" | u8 dtype (0=f32, 1=f64) | u8 rank | rank x u32 extents | raw values
PIDCKPT1: b"PIDCKPT1" | u32 count | count x (u16 name length | utf-8 name | TSR1 blob)

All integers and values are little-endian; values are row-major.
"""

from __future__ import annotations

import os
import struct
from typing import Dict, Mapping, Tuple, Union

import numpy as np

TSR_MAGIC = b"TSR1"
CKPT_MAGIC = b"PIDCKPT1"
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}

PathLike = Union[str, os.PathLike]


class FormatError(ValueError):
    """Corrupt or truncated TSR1/PIDCKPT1 data; the message names the byte offset."""


def encode_tensor(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    if arr.dtype not in _DTYPE_CODES:
        raise TypeError(f"TSR1 stores float32/float64 only, got {arr.dtype}")
    if arr.ndim > 255:
        raise ValueError("TSR1 rank is limited to 255")
    code = _DTYPE_CODES[arr.dtype]
    header = TSR_MAGIC + struct.pack("<BB", code, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype=_CODE_DTYPES[code]).tobytes()


def decode_tensor(buf: bytes, offset: int = 0) -> Tuple[np.ndarray, int]:
    """Parse one TSR1 blob starting at ``offset``; returns (array, next offset)."""
    end = len(buf)

    def need(n: int, what: str) -> None:
        if offset + n > end:
            raise FormatError(f"truncated TSR1 {what} at offset {offset}: need {n} bytes, have {end - offset}")

    need(4, "magic")
    if buf[offset:offset + 4] != TSR_MAGIC:
        raise FormatError(f"bad TSR1 magic at offset {offset}: {bytes(buf[offset:offset + 4])!r}")
    offset += 4
    need(2, "header")
    code, rank = struct.unpack_from("<BB", buf, offset)
    if code not in _CODE_DTYPES:
        raise FormatError(f"unknown TSR1 dtype code {code} at offset {offset}")
    offset += 2
    need(4 * rank, "extents")
    shape = struct.unpack_from(f"<{rank}I", buf, offset)
    offset += 4 * rank
    dtype = _CODE_DTYPES[code]
    nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    need(nbytes, "payload")
    arr = np.frombuffer(buf, dtype=dtype, count=nbytes // dtype.itemsize, offset=offset).reshape(shape)
    return arr.astype(dtype.newbyteorder("="), copy=True), offset + nbytes


def save_tensor(path: PathLike, arr: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_tensor(arr))


def load_tensor(path: PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        buf = fh.read()
    arr, off = decode_tensor(buf)
    if off != len(buf):
        raise FormatError(f"{path}: {len(buf) - off} trailing bytes after TSR1 payload at offset {off}")
    return arr


def encode_checkpoint(tensors: Mapping[str, np.ndarray]) -> bytes:
    parts = [CKPT_MAGIC, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ValueError(f"checkpoint entry name too long: {name[:40]}...")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(encode_tensor(arr))
    return b"".join(parts)


def decode_checkpoint(buf: bytes) -> Dict[str, np.ndarray]:
    if len(buf) < len(CKPT_MAGIC) + 4:
        raise FormatError(f"truncated checkpoint header at offset 0: {len(buf)} bytes")
    if buf[:8] != CKPT_MAGIC:
        raise FormatError(f"bad checkpoint magic at offset 0: {bytes(buf[:8])!r}")
    (count,) = struct.unpack_from("<I", buf, 8)
    offset = 12
    out: Dict[str, np.ndarray] = {}
    for _ in range(count):
        if offset + 2 > len(buf):
            raise FormatError(f"truncated checkpoint record at offset {offset}")
        (n,) = struct.unpack_from("<H", buf, offset)
        offset += 2
        if offset + n > len(buf):
            raise FormatError(f"truncated checkpoint name at offset {offset}")
        name = bytes(buf[offset:offset + n]).decode("utf-8")
        offset += n
        out[name], offset = decode_tensor(buf, offset)
    if offset != len(buf):
        raise FormatError(f"{len(buf) - offset} trailing bytes after checkpoint records at offset {offset}")
    return out


def save_checkpoint(path: PathLike, tensors: Mapping[str, np.ndarray]) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(encode_checkpoint(tensors))
    os.replace(tmp, path)


def load_checkpoint(path: PathLike) -> Dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read())
