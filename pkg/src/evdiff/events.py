"""Event streams and the EVT1 binary container.

An event is (x, y, p, t): column, row, polarity in {-1,+1} and timestamp
in microseconds.  Streams are kept in a packed little-endian structured
array so the in-memory layout equals the on-disk layout.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np

from .errors import DataError, FormatError

# 10 bytes per event, little endian, no padding between fields.
EVENT_DTYPE = np.dtype(
    [("x", "<u2"), ("y", "<u2"), ("p", "<i1"), ("pad", "<u1"), ("t", "<u4")]
)
assert EVENT_DTYPE.itemsize == 10

EVT1_MAGIC = b"EVT1"
EVT1_HEADER = struct.Struct("<4sHHII")  # magic, width, height, count, duration
assert EVT1_HEADER.size == 16


def make_events(x, y, p, t) -> np.ndarray:
    """Pack parallel coordinate arrays into the event record layout."""
    x = np.asarray(x)
    n = x.shape[0]
    ev = np.zeros(n, dtype=EVENT_DTYPE)
    ev["x"] = x
    ev["y"] = y
    ev["p"] = p
    ev["t"] = t
    return ev


def sort_events(events: np.ndarray) -> np.ndarray:
    """Canonical order: t ascending, ties broken by (y, x, p)."""
    order = np.lexsort((events["p"], events["x"], events["y"], events["t"]))
    return events[order]


@dataclass
class EventStream:
    """Time-ordered events plus the sensor geometry they live on."""

    events: np.ndarray  # EVENT_DTYPE records
    width: int
    height: int
    duration_us: int

    def __len__(self) -> int:
        return len(self.events)

    def validate(self) -> None:
        ev = self.events
        if ev.dtype != EVENT_DTYPE:
            raise DataError(f"event dtype must be {EVENT_DTYPE}, got {ev.dtype}")
        if len(ev) == 0:
            return
        if ev["x"].max(initial=0) >= self.width or ev["y"].max(initial=0) >= self.height:
            raise DataError("event coordinates outside sensor geometry")
        if ev["t"].max(initial=0) > self.duration_us:
            raise DataError("event timestamp beyond stream duration")
        if not np.all(np.isin(ev["p"].astype(np.int32), (-1, 1))):
            raise DataError("polarity must be -1 or +1")
        key = ev["t"].astype(np.int64)
        if np.any(np.diff(key) < 0):
            raise DataError("events not sorted by timestamp")

    def select(self, t0: int, t1: int) -> np.ndarray:
        """Events with t0 <= t < t1 (stream stays untouched)."""
        t = self.events["t"]
        lo = np.searchsorted(t, t0, side="left")
        hi = np.searchsorted(t, t1, side="left")
        return self.events[lo:hi]


def write_evt1(stream: EventStream, path: str | os.PathLike) -> None:
    stream.validate()
    header = EVT1_HEADER.pack(
        EVT1_MAGIC, stream.width, stream.height, len(stream.events), stream.duration_us
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(stream.events.tobytes())


def read_evt1(path: str | os.PathLike) -> EventStream:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < EVT1_HEADER.size:
        raise FormatError("EVT1 file shorter than header", offset=len(raw))
    magic, width, height, count, duration = EVT1_HEADER.unpack_from(raw, 0)
    if magic != EVT1_MAGIC:
        raise FormatError("bad EVT1 magic", offset=0)
    body = raw[EVT1_HEADER.size :]
    expected = count * EVENT_DTYPE.itemsize
    if len(body) != expected:
        raise FormatError(
            f"EVT1 payload is {len(body)} bytes, expected {expected}",
            offset=EVT1_HEADER.size + min(len(body), expected),
        )
    events = np.frombuffer(body, dtype=EVENT_DTYPE).copy()
    stream = EventStream(events, width, height, duration)
    try:
        stream.validate()
    except DataError as exc:
        raise FormatError(f"EVT1 payload invalid: {exc}", offset=EVT1_HEADER.size) from exc
    return stream
