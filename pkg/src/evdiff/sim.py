"""Synthetic scene rendering and the intensity-threshold event model.

Scenes are deterministic functions of (spec, t): shapes translate with a
constant velocity, rotate with a constant angular velocity, and the whole
frame may be displaced by a sinusoidal camera shake.  Events are emitted
per pixel whenever the log intensity crosses one threshold step beyond
the pixel's reference level, with the timestamp linearly interpolated
inside the sampling interval.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, ParameterError, RangeError, ValidationError
from .events import EventStream, make_events, sort_events
from .rng import STREAM_SCENE, SeededRandomSource

# Floor added to intensity before taking logs; avoids log(0) on black pixels.
LOG_FLOOR = 1e-3

DEFAULT_THRESHOLD = 0.15
DEFAULT_DT_US = 100

_SHAPES = ("rectangle", "disk", "bar")


@dataclass
class SceneObject:
    shape: str  # rectangle | disk | bar
    size: tuple[float, float]  # (width, height) px; disks use width as diameter
    position: tuple[float, float]  # center (x, y) at t=0, px
    velocity: tuple[float, float] = (0.0, 0.0)  # px / second
    angular_velocity: float = 0.0  # radians / second
    intensity: float = 1.0


@dataclass
class SceneSpec:
    width: int
    height: int
    duration_us: int
    background: float = 0.5
    objects: list[SceneObject] = field(default_factory=list)
    shake_amplitude: float = 0.0  # px
    shake_frequency: float = 0.0  # Hz
    seed: int = 0

    def validate(self) -> None:
        if self.duration_us <= 0:
            raise ValidationError("duration_us", "must be positive")
        if not 0.0 <= self.background <= 1.0:
            raise ValidationError("background", "must lie in [0, 1]")
        if self.shake_amplitude < 0:
            raise ValidationError("shake_amplitude", "must be nonnegative")
        for i, obj in enumerate(self.objects):
            where = f"objects[{i}]"
            if obj.shape not in _SHAPES:
                raise ValidationError(f"{where}.shape", f"must be one of {_SHAPES}")
            if not 0.0 <= obj.intensity <= 1.0:
                raise ValidationError(f"{where}.intensity", "must lie in [0, 1]")
            x, y = obj.position
            if not (0 <= x < self.width and 0 <= y < self.height):
                raise ValidationError(f"{where}.position", "must lie inside the canvas")

    def to_json(self) -> str:
        doc = {
            "width": self.width,
            "height": self.height,
            "duration_us": self.duration_us,
            "background": self.background,
            "shake_amplitude": self.shake_amplitude,
            "shake_frequency": self.shake_frequency,
            "seed": self.seed,
            "objects": [
                {
                    "shape": o.shape,
                    "size": list(o.size),
                    "position": list(o.position),
                    "velocity": list(o.velocity),
                    "angular_velocity": o.angular_velocity,
                    "intensity": o.intensity,
                }
                for o in self.objects
            ],
        }
        return json.dumps(doc, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "SceneSpec":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ValidationError("scene", f"not valid JSON: {exc}") from exc
        try:
            objects = [
                SceneObject(
                    shape=o["shape"],
                    size=tuple(o["size"]),
                    position=tuple(o["position"]),
                    velocity=tuple(o.get("velocity", (0.0, 0.0))),
                    angular_velocity=o.get("angular_velocity", 0.0),
                    intensity=o.get("intensity", 1.0),
                )
                for o in doc.get("objects", [])
            ]
            spec = cls(
                width=doc["width"],
                height=doc["height"],
                duration_us=doc["duration_us"],
                background=doc.get("background", 0.5),
                objects=objects,
                shake_amplitude=doc.get("shake_amplitude", 0.0),
                shake_frequency=doc.get("shake_frequency", 0.0),
                seed=doc.get("seed", 0),
            )
        except (KeyError, TypeError) as exc:
            raise ValidationError("scene", f"missing or malformed field: {exc}") from exc
        spec.validate()
        return spec


def _shake_phases(spec: SceneSpec) -> tuple[float, float]:
    gen = SeededRandomSource(spec.seed, STREAM_SCENE).generator(0)
    return tuple(gen.random(2) * 2.0 * math.pi)


def _shake_offset(spec: SceneSpec, t_us: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    if spec.shake_amplitude == 0.0:
        zero = np.zeros_like(t_us, dtype=np.float64)
        return zero, zero
    phase_x, phase_y = _shake_phases(spec)
    t_s = t_us.astype(np.float64) * 1e-6
    arg = 2.0 * math.pi * spec.shake_frequency * t_s
    return (
        spec.shake_amplitude * np.sin(arg + phase_x),
        spec.shake_amplitude * np.sin(arg + phase_y),
    )


def _object_occupancy(
    obj: SceneObject, spec: SceneSpec, t_us: np.ndarray
) -> np.ndarray:
    """Boolean (T, H, W): pixel centers covered by the object at each time."""
    t_s = t_us.astype(np.float64) * 1e-6
    sx, sy = _shake_offset(spec, t_us)
    cx = obj.position[0] + obj.velocity[0] * t_s + sx  # (T,)
    cy = obj.position[1] + obj.velocity[1] * t_s + sy
    xs = np.arange(spec.width, dtype=np.float64)
    ys = np.arange(spec.height, dtype=np.float64)
    dx = xs[None, None, :] - cx[:, None, None]  # (T, 1, W)
    dy = ys[None, :, None] - cy[:, None, None]  # (T, H, 1)
    if obj.angular_velocity != 0.0:
        theta = obj.angular_velocity * t_s
        cos_t = np.cos(theta)[:, None, None]
        sin_t = np.sin(theta)[:, None, None]
        # Rotate pixel offsets into the object frame (inverse rotation).
        rx = cos_t * dx + sin_t * dy
        ry = -sin_t * dx + cos_t * dy
    else:
        rx, ry = np.broadcast_arrays(dx, dy)
    if obj.shape == "disk":
        r = obj.size[0] / 2.0
        return rx * rx + ry * ry <= r * r
    hx, hy = obj.size[0] / 2.0, obj.size[1] / 2.0
    return (np.abs(rx) <= hx) & (np.abs(ry) <= hy)


def _check_time(spec: SceneSpec, t_us) -> None:
    t = np.asarray(t_us)
    if np.any(t < 0) or np.any(t > spec.duration_us):
        raise RangeError(f"time {t_us} outside [0, {spec.duration_us}] us")


def render_times(spec: SceneSpec, t_us: np.ndarray) -> np.ndarray:
    """Intensity frames (T, H, W) in [0, 1] for a batch of times."""
    _check_time(spec, t_us)
    t_us = np.asarray(t_us, dtype=np.int64)
    frames = np.full(
        (len(t_us), spec.height, spec.width), spec.background, dtype=np.float64
    )
    for obj in spec.objects:
        occ = _object_occupancy(obj, spec, t_us)
        frames[occ] = obj.intensity
    return np.clip(frames, 0.0, 1.0)


def render_scene(spec: SceneSpec, t_us: int) -> np.ndarray:
    """Intensity frame (H, W) in [0, 1] at a single time."""
    return render_times(spec, np.array([t_us]))[0]


def object_mask_times(spec: SceneSpec, t_us: np.ndarray) -> np.ndarray:
    """Boolean (T, H, W): any object covers the pixel center."""
    _check_time(spec, t_us)
    t_us = np.asarray(t_us, dtype=np.int64)
    mask = np.zeros((len(t_us), spec.height, spec.width), dtype=bool)
    for obj in spec.objects:
        mask |= _object_occupancy(obj, spec, t_us)
    return mask


def object_mask(spec: SceneSpec, t_us: int) -> np.ndarray:
    return object_mask_times(spec, np.array([t_us]))[0]


def emit_events(
    spec: SceneSpec,
    threshold: float = DEFAULT_THRESHOLD,
    dt_us: int = DEFAULT_DT_US,
    log_floor: float = LOG_FLOOR,
) -> EventStream:
    """Threshold-crossing events from the log-intensity signal.

    The scene is sampled every ``dt_us``; inside each interval, every
    crossing of ``k * threshold`` beyond the pixel's reference level
    emits one event, timestamped by linear interpolation between the two
    samples.  The reference level advances by one threshold step per
    event, so the running polarity sum tracks the sampled log-intensity
    change to within one threshold.
    """
    if threshold <= 0:
        raise ParameterError("threshold must be positive")
    if dt_us <= 0 or spec.duration_us % dt_us != 0:
        raise ParameterError("dt_us must be positive and divide the scene duration")
    spec.validate()

    n_steps = spec.duration_us // dt_us
    chunk = 512  # time samples per render batch, keeps memory flat

    xs_all, ys_all, ps_all, ts_all = [], [], [], []
    log_prev = np.log(render_scene(spec, 0) + log_floor)
    ref = log_prev.copy()

    k = 1
    while k <= n_steps:
        k_hi = min(k + chunk - 1, n_steps)
        times = np.arange(k, k_hi + 1, dtype=np.int64) * dt_us
        log_block = np.log(render_times(spec, times) + log_floor)
        for j, t_new in enumerate(times):
            log_new = log_block[j]
            delta = log_new - ref
            sign = np.sign(delta)
            count = np.floor(np.abs(delta) / threshold).astype(np.int64)
            if count.any():
                yy, xx = np.nonzero(count)
                c = count[yy, xx]
                total = int(c.sum())
                rep = np.repeat(np.arange(len(c)), c)
                starts = np.concatenate(([0], np.cumsum(c)[:-1]))
                j_idx = (np.arange(total) - starts[rep] + 1).astype(np.float64)
                sgn = sign[yy, xx][rep]
                levels = ref[yy, xx][rep] + j_idx * threshold * sgn
                seg_lo = log_prev[yy, xx][rep]
                seg_hi = log_new[yy, xx][rep]
                seg = seg_hi - seg_lo
                frac = np.where(seg != 0.0, (levels - seg_lo) / np.where(seg == 0, 1, seg), 1.0)
                frac = np.clip(frac, 0.0, 1.0)
                # ceil keeps timestamps strictly inside ((t_new - dt), t_new],
                # so the emitting interval is recoverable from the timestamp.
                t_ev = (t_new - dt_us) + np.maximum(np.ceil(frac * dt_us), 1.0)
                xs_all.append(xx[rep].astype(np.uint16))
                ys_all.append(yy[rep].astype(np.uint16))
                ps_all.append(sgn.astype(np.int8))
                ts_all.append(t_ev.astype(np.uint32))
                ref[yy, xx] += c * threshold * sign[yy, xx]
            log_prev = log_new
        k = k_hi + 1

    if xs_all:
        events = make_events(
            np.concatenate(xs_all),
            np.concatenate(ys_all),
            np.concatenate(ps_all),
            np.concatenate(ts_all),
        )
        events = sort_events(events)
    else:
        events = make_events(
            np.zeros(0, np.uint16), np.zeros(0, np.uint16), np.zeros(0, np.int8), np.zeros(0, np.uint32)
        )
    return EventStream(events, spec.width, spec.height, spec.duration_us)


def sampled_log_change(
    spec: SceneSpec, dt_us: int = DEFAULT_DT_US, log_floor: float = LOG_FLOOR
) -> np.ndarray:
    """Per-sample log-intensity change since t=0: (n_steps+1, H, W).

    Independent reference signal for the threshold round-trip check.
    """
    n_steps = spec.duration_us // dt_us
    times = np.arange(n_steps + 1, dtype=np.int64) * dt_us
    out = np.empty((n_steps + 1, spec.height, spec.width), dtype=np.float64)
    base = None
    for lo in range(0, n_steps + 1, 512):
        hi = min(lo + 512, n_steps + 1)
        block = np.log(render_times(spec, times[lo:hi]) + log_floor)
        if base is None:
            base = block[0].copy()
        out[lo:hi] = block - base
    return out


def moving_square_suite(
    count: int,
    seed: int,
    width: int = 64,
    height: int = 64,
    duration_us: int = 400_000,
) -> list[SceneSpec]:
    """Deterministic family of single-square scenes used for training.

    Squares are sized, placed and aimed so they stay fully inside the
    canvas for the whole duration; half are brighter than the
    background, half darker.
    """
    if count <= 0:
        raise ParameterError("count must be positive")
    scenes = []
    duration_s = duration_us * 1e-6
    extent = min(width, height)
    side_lo, side_hi = min(8.0, extent / 8.0), min(16.0, extent / 4.0)
    for i in range(count):
        gen = SeededRandomSource(seed, STREAM_SCENE).generator(1 + i)
        side = float(gen.uniform(side_lo, side_hi))
        # Whole travel must fit the canvas with the square's margin.
        box = extent - 2.0 * (side / 2.0 + 1.0) - 1.0
        speed_cap = 0.9 * box / duration_s / math.sqrt(2.0)
        speed_hi = min(110.0, speed_cap)
        speed_lo = min(40.0, 0.4 * speed_hi)
        speed = float(gen.uniform(speed_lo, speed_hi))
        angle = float(gen.uniform(0.0, 2.0 * math.pi))
        vx, vy = speed * math.cos(angle), speed * math.sin(angle)
        margin = side / 2.0 + 1.0
        lo_x = margin + max(0.0, -vx * duration_s)
        hi_x = width - 1 - margin - max(0.0, vx * duration_s)
        lo_y = margin + max(0.0, -vy * duration_s)
        hi_y = height - 1 - margin - max(0.0, vy * duration_s)
        if hi_x <= lo_x or hi_y <= lo_y:
            raise DataError("suite geometry infeasible; lower speeds or grow canvas")
        px = float(gen.uniform(lo_x, hi_x))
        py = float(gen.uniform(lo_y, hi_y))
        bright = bool(gen.integers(0, 2))
        intensity = float(gen.uniform(0.75, 0.95)) if bright else float(gen.uniform(0.05, 0.2))
        scenes.append(
            SceneSpec(
                width=width,
                height=height,
                duration_us=duration_us,
                background=0.4,
                objects=[
                    SceneObject(
                        shape="rectangle",
                        size=(side, side),
                        position=(px, py),
                        velocity=(vx, vy),
                        intensity=intensity,
                    )
                ],
                seed=seed * 1_000_003 + i,
            )
        )
    return scenes


def write_masks(
    spec: SceneSpec, times_us: np.ndarray, path: str | os.PathLike
) -> None:
    """Ground-truth masks at the given times as a compact .npz document."""
    masks = object_mask_times(spec, times_us)
    with open(path, "wb") as fh:
        np.savez(fh, times_us=np.asarray(times_us, dtype=np.int64), masks=masks)


def read_masks(path: str | os.PathLike) -> tuple[np.ndarray, np.ndarray]:
    with np.load(path) as doc:
        return doc["times_us"], doc["masks"]
