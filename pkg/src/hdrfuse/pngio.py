"""Minimal PNG reader/writer for the formats the toolkit emits.

Supports 8- and 16-bit grayscale and RGB, non-interlaced. Writing uses
filter type 0 on every row, which keeps output byte-deterministic; reading
handles all five standard filters.
"""

from __future__ import annotations

import struct
import zlib

import numpy as np

from .errors import FormatError

_SIGNATURE = b"\x89PNG\r\n\x1a\n"


def _chunk(tag: bytes, payload: bytes) -> bytes:
    return (
        struct.pack(">I", len(payload))
        + tag
        + payload
        + struct.pack(">I", zlib.crc32(tag + payload) & 0xFFFFFFFF)
    )


def write_png(path, values: np.ndarray) -> None:
    """Write a uint8/uint16 array of shape (H, W) or (H, W, 3) as PNG."""
    arr = np.asarray(values)
    if arr.dtype == np.uint8:
        bit_depth = 8
    elif arr.dtype == np.uint16:
        bit_depth = 16
    else:
        raise FormatError(f"PNG writer expects uint8 or uint16, got {arr.dtype}")
    if arr.ndim == 2:
        color_type, channels = 0, 1
    elif arr.ndim == 3 and arr.shape[2] == 3:
        color_type, channels = 2, 3
    else:
        raise FormatError(f"PNG writer expects (H,W) or (H,W,3), got shape {arr.shape}")
    height, width = arr.shape[:2]
    ihdr = struct.pack(">IIBBBBB", width, height, bit_depth, color_type, 0, 0, 0)
    row_bytes = arr.reshape(height, width * channels).astype(">u2" if bit_depth == 16 else "u1")
    raw = b"".join(b"\x00" + row.tobytes() for row in row_bytes)
    payload = zlib.compress(raw, 6)
    with open(path, "wb") as fh:
        fh.write(_SIGNATURE)
        fh.write(_chunk(b"IHDR", ihdr))
        fh.write(_chunk(b"IDAT", payload))
        fh.write(_chunk(b"IEND", b""))


def _unfilter(raw: bytes, height: int, width: int, channels: int, depth: int) -> np.ndarray:
    bpp = channels * (depth // 8)
    stride = width * bpp
    out = bytearray(height * stride)
    pos = 0
    prev_row = bytearray(stride)
    for y in range(height):
        ftype = raw[pos]
        pos += 1
        row = bytearray(raw[pos:pos + stride])
        pos += stride
        if ftype == 0:
            pass
        elif ftype == 1:  # Sub
            for i in range(bpp, stride):
                row[i] = (row[i] + row[i - bpp]) & 0xFF
        elif ftype == 2:  # Up
            for i in range(stride):
                row[i] = (row[i] + prev_row[i]) & 0xFF
        elif ftype == 3:  # Average
            for i in range(stride):
                left = row[i - bpp] if i >= bpp else 0
                row[i] = (row[i] + ((left + prev_row[i]) >> 1)) & 0xFF
        elif ftype == 4:  # Paeth
            for i in range(stride):
                a = row[i - bpp] if i >= bpp else 0
                b = prev_row[i]
                c = prev_row[i - bpp] if i >= bpp else 0
                p = a + b - c
                pa, pb, pc = abs(p - a), abs(p - b), abs(p - c)
                if pa <= pb and pa <= pc:
                    pred = a
                elif pb <= pc:
                    pred = b
                else:
                    pred = c
                row[i] = (row[i] + pred) & 0xFF
        else:
            raise FormatError(f"unsupported PNG filter type {ftype}")
        out[y * stride:(y + 1) * stride] = row
        prev_row = row
    dtype = ">u2" if depth == 16 else "u1"
    arr = np.frombuffer(bytes(out), dtype=dtype).reshape(height, width, channels)
    return arr.astype(np.uint16 if depth == 16 else np.uint8)


def read_png(path) -> np.ndarray:
    """Read a PNG written by :func:`write_png` (8/16-bit gray or RGB)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != _SIGNATURE:
        raise FormatError(f"{path}: not a PNG file")
    pos = 8
    ihdr = None
    idat = b""
    while pos < len(blob):
        (length,) = struct.unpack(">I", blob[pos:pos + 4])
        tag = blob[pos + 4:pos + 8]
        payload = blob[pos + 8:pos + 8 + length]
        pos += 12 + length
        if tag == b"IHDR":
            ihdr = struct.unpack(">IIBBBBB", payload)
        elif tag == b"IDAT":
            idat += payload
        elif tag == b"IEND":
            break
    if ihdr is None:
        raise FormatError(f"{path}: missing IHDR chunk")
    width, height, depth, color_type, _, _, interlace = ihdr
    if interlace != 0:
        raise FormatError(f"{path}: interlaced PNG not supported")
    if depth not in (8, 16):
        raise FormatError(f"{path}: unsupported bit depth {depth}")
    if color_type == 0:
        channels = 1
    elif color_type == 2:
        channels = 3
    else:
        raise FormatError(f"{path}: unsupported color type {color_type}")
    raw = zlib.decompress(idat)
    arr = _unfilter(raw, height, width, channels, depth)
    return arr[:, :, 0] if channels == 1 else arr
