"""Tiny dependency-free PNG writer for rendered voxel frames."""

from __future__ import annotations

import os
import struct
import zlib

import numpy as np

from .errors import DataError


def _chunk(tag: bytes, payload: bytes) -> bytes:
    crc = zlib.crc32(tag + payload) & 0xFFFFFFFF
    return struct.pack(">I", len(payload)) + tag + payload + struct.pack(">I", crc)


def write_png(path: str | os.PathLike, img: np.ndarray) -> None:
    """Write (H, W) grayscale or (H, W, 3) RGB uint8 image."""
    if img.dtype != np.uint8:
        raise DataError("png writer expects uint8 pixels")
    if img.ndim == 2:
        color_type = 0
        rows = img[:, :, None]
    elif img.ndim == 3 and img.shape[2] == 3:
        color_type = 2
        rows = img
    else:
        raise DataError(f"unsupported image shape {img.shape}")
    height, width = rows.shape[:2]
    ihdr = struct.pack(">IIBBBBB", width, height, 8, color_type, 0, 0, 0)
    raw = b"".join(b"\x00" + rows[y].tobytes() for y in range(height))
    payload = zlib.compress(raw, level=9)
    with open(path, "wb") as fh:
        fh.write(b"\x89PNG\r\n\x1a\n")
        fh.write(_chunk(b"IHDR", ihdr))
        fh.write(_chunk(b"IDAT", payload))
        fh.write(_chunk(b"IEND", b""))


def voxel_frame_to_rgb(frame: np.ndarray) -> np.ndarray:
    """(B, H, W) signed voxel frame in [-1, 1] -> (H, W, 3) uint8.

    The first three bins map to RGB channels; missing bins repeat the
    last one, extra bins are dropped.
    """
    bins = frame.shape[0]
    chans = [frame[min(i, bins - 1)] for i in range(3)]
    img = np.stack(chans, axis=-1)
    img = np.clip((img + 1.0) / 2.0, 0.0, 1.0)
    return np.round(img * 255.0).astype(np.uint8)
