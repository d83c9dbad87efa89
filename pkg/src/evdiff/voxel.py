"""Voxel-grid event representation and the VOX1 binary container.

Events are accumulated into (B, H, W) grids per time window: each event
deposits its signed polarity, split between the two nearest temporal bin
centers by linear interpolation.  Sequences of such frames are the state
space of the diffusion model; they are normalized by one sequence-wide
maximum so relative magnitudes between frames survive (per-frame scaling
would make the rendered sequence flicker).
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, replace as dc_replace

import numpy as np

from .errors import DataError, FormatError, ParameterError, RangeError

DEFAULT_BINS = 3
DEFAULT_WINDOW_US = 20_000

VOX1_MAGIC = b"VOX1"
VOX1_HEADER = struct.Struct("<4sHHHHfI")  # magic, B, H, W, frames, scale, window_us


@dataclass
class VoxelFrame:
    values: np.ndarray  # (B, H, W) float32
    t0: int
    t1: int

    @property
    def bins(self) -> int:
        return self.values.shape[0]


@dataclass
class VoxelSequence:
    values: np.ndarray  # (F, B, H, W) float32
    t0: int
    window_us: int
    scale: float | None = None  # factor divided out by normalization, if any

    @property
    def frames(self) -> int:
        return self.values.shape[0]

    @property
    def bins(self) -> int:
        return self.values.shape[1]

    def frame(self, i: int) -> VoxelFrame:
        t0 = self.t0 + i * self.window_us
        return VoxelFrame(self.values[i], t0, t0 + self.window_us)


def voxelize(
    events: np.ndarray, t0: int, t1: int, bins: int, height: int, width: int
) -> VoxelFrame:
    """Deposit events from [t0, t1) into a (B, H, W) grid.

    The temporal kernel is the unit hat: weight splits between the two
    nearest bin centers, and positions outside the first/last center
    clamp to the edge bin.  Weights are computed in float32 so the two
    shares of one event sum to exactly 1.0f.
    """
    if t1 <= t0:
        raise RangeError(f"window [{t0}, {t1}) is empty or inverted")
    if bins < 1:
        raise ParameterError("bins must be >= 1")
    grid = np.zeros((bins, height, width), dtype=np.float32)
    t = events["t"].astype(np.int64)
    inside = (t >= t0) & (t < t1)
    ev = events[inside]
    if len(ev) == 0:
        return VoxelFrame(grid, t0, t1)
    if ev["x"].max() >= width or ev["y"].max() >= height:
        raise DataError("event coordinates outside the voxel grid")

    # Bin coordinate of each event: u = 0 at the first bin center.
    span = np.float32(t1 - t0)
    rel = (ev["t"].astype(np.int64) - t0).astype(np.float32)
    u = rel / span * np.float32(bins) - np.float32(0.5)
    u = np.clip(u, np.float32(0.0), np.float32(bins - 1))
    b0 = np.floor(u).astype(np.int64)
    b0 = np.minimum(b0, bins - 1)
    w1 = (u - b0.astype(np.float32)).astype(np.float32)
    w0 = (np.float32(1.0) - w1).astype(np.float32)
    p = ev["p"].astype(np.float32)
    y = ev["y"].astype(np.int64)
    x = ev["x"].astype(np.int64)
    np.add.at(grid, (b0, y, x), w0 * p)
    b1 = np.minimum(b0 + 1, bins - 1)
    hi = w1 > 0
    np.add.at(grid, (b1[hi], y[hi], x[hi]), (w1 * p)[hi])
    return VoxelFrame(grid, t0, t1)


def windowize(
    stream,
    interval_us: int = DEFAULT_WINDOW_US,
    bins: int = DEFAULT_BINS,
    t_start: int = 0,
    n_frames: int | None = None,
) -> VoxelSequence:
    """Tile the stream into consecutive windows and voxelize each one."""
    if interval_us <= 0:
        raise ParameterError("interval_us must be positive")
    if n_frames is None:
        n_frames = (stream.duration_us - t_start) // interval_us
    if n_frames < 1:
        raise RangeError("stream shorter than one window")
    if t_start + n_frames * interval_us > stream.duration_us:
        raise RangeError("windows extend past the stream duration")
    frames = np.zeros((n_frames, bins, stream.height, stream.width), dtype=np.float32)
    for i in range(n_frames):
        lo = t_start + i * interval_us
        sel = stream.select(lo, lo + interval_us)
        frames[i] = voxelize(sel, lo, lo + interval_us, bins, stream.height, stream.width).values
    return VoxelSequence(frames, t_start, interval_us)


def normalize_sequence(seq: VoxelSequence) -> VoxelSequence:
    """Divide every value by the sequence-wide max absolute value.

    The recorded scale composes across repeated calls, so normalization
    is idempotent.  An all-zero sequence is returned unchanged.
    """
    peak = float(np.max(np.abs(seq.values))) if seq.values.size else 0.0
    if peak == 0.0:
        return seq
    values = (seq.values / np.float32(peak)).astype(np.float32)
    prior = seq.scale if seq.scale is not None else 1.0
    return dc_replace(seq, values=values, scale=prior * peak)


def to_unit_images(values: np.ndarray) -> np.ndarray:
    """Map signed voxel values in [-1, 1] to [0, 1] image range."""
    return np.clip((values.astype(np.float64) + 1.0) / 2.0, 0.0, 1.0)


def write_vox1(seq: VoxelSequence, path: str | os.PathLike) -> None:
    values = np.ascontiguousarray(seq.values, dtype="<f4")
    n_frames, bins, height, width = values.shape
    scale = float("nan") if seq.scale is None else float(seq.scale)
    header = VOX1_HEADER.pack(VOX1_MAGIC, bins, height, width, n_frames, scale, seq.window_us)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(values.tobytes())


def read_vox1(path: str | os.PathLike) -> VoxelSequence:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < VOX1_HEADER.size:
        raise FormatError("VOX1 file shorter than header", offset=len(raw))
    magic, bins, height, width, n_frames, scale, window_us = VOX1_HEADER.unpack_from(raw, 0)
    if magic != VOX1_MAGIC:
        raise FormatError("bad VOX1 magic", offset=0)
    body = raw[VOX1_HEADER.size :]
    expected = n_frames * bins * height * width * 4
    if len(body) != expected:
        raise FormatError(
            f"VOX1 payload is {len(body)} bytes, expected {expected}",
            offset=VOX1_HEADER.size + min(len(body), expected),
        )
    values = np.frombuffer(body, dtype="<f4").reshape(n_frames, bins, height, width).copy()
    if not np.all(np.isfinite(values)):
        raise FormatError("VOX1 payload contains non-finite values", offset=VOX1_HEADER.size)
    return VoxelSequence(
        values, t0=0, window_us=window_us, scale=None if np.isnan(scale) else float(scale)
    )
