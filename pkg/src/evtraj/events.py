"""Event stream containers, validation, binary/CSV I/O, and voxelization.

An event camera reports asynchronous per-pixel brightness changes. Each
record is (x, y, t, p): pixel column/row, timestamp in seconds, and
polarity +1/-1. Streams are kept in struct-of-arrays form (one numpy
array per field) because everything downstream is vectorized.

Binary interchange format "EVT1" (little-endian):

    magic  b"EVT1"   4 bytes
    width  u32, height u32
    count  u64
    t_start f64, t_end f64
    count records of {t f64, x u16, y u16, p i8, pad u8}   (14 bytes each)

CSV format: header line ``t,x,y,p``, one record per line.
"""

from __future__ import annotations

import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np

EVT1_MAGIC = b"EVT1"
_HEADER_DTYPE = np.dtype(
    [
        ("magic", "S4"),
        ("width", "<u4"),
        ("height", "<u4"),
        ("count", "<u8"),
        ("t_start", "<f8"),
        ("t_end", "<f8"),
    ]
)
_RECORD_DTYPE = np.dtype(
    [("t", "<f8"), ("x", "<u2"), ("y", "<u2"), ("p", "<i1"), ("pad", "<u1")]
)


class EventFormatError(ValueError):
    """Malformed event file; message names the offending byte offset or line."""


@dataclass(frozen=True)
class Event:
    """A single brightness-change record."""

    x: int
    y: int
    t: float
    p: int


@dataclass(frozen=True)
class EventSlice:
    """Time-sorted events in [t_start, t_end] for a W x H sensor.

    Arrays share one length N. Polarity is +1/-1. Construction validates
    the invariants; use :meth:`from_arrays` to repair unsorted input.
    """

    x: np.ndarray
    y: np.ndarray
    t: np.ndarray
    p: np.ndarray
    t_start: float
    t_end: float
    width: int
    height: int

    def __post_init__(self):
        n = len(self.t)
        if not (len(self.x) == len(self.y) == len(self.p) == n):
            raise ValueError("event field arrays must share one length")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("sensor geometry must be positive")
        if self.t_end < self.t_start:
            raise ValueError("t_end must be >= t_start")
        if n == 0:
            return
        if not np.all(np.isfinite(self.t)):
            raise ValueError("non-finite timestamp in slice")
        if np.any(np.diff(self.t) < 0):
            raise ValueError("events not sorted by timestamp")
        if self.t[0] < self.t_start or self.t[-1] > self.t_end:
            raise ValueError("event timestamps outside [t_start, t_end]")
        if np.any((self.x < 0) | (self.x >= self.width)):
            raise ValueError("x coordinate outside [0, width)")
        if np.any((self.y < 0) | (self.y >= self.height)):
            raise ValueError("y coordinate outside [0, height)")
        if not np.all(np.abs(self.p) == 1):
            raise ValueError("polarity must be +1 or -1")

    def __len__(self) -> int:
        return len(self.t)

    @property
    def duration(self) -> float:
        return self.t_end - self.t_start

    def normalized_times(self) -> np.ndarray:
        """Timestamps mapped to [0, 1] over [t_start, t_end].

        A degenerate interval maps every event to 0. All trajectory math
        operates on this normalized axis.
        """
        if self.duration <= 0.0:
            return np.zeros(len(self), dtype=np.float64)
        return (self.t - self.t_start) / self.duration

    @classmethod
    def from_arrays(
        cls,
        x,
        y,
        t,
        p,
        width: int,
        height: int,
        t_start: float | None = None,
        t_end: float | None = None,
    ) -> "EventSlice":
        """Build a slice from raw arrays, stable-sorting by timestamp.

        t_start/t_end default to the data extremes (0 for empty input).
        Equal timestamps keep their input order.
        """
        x = np.asarray(x, dtype=np.int64)
        y = np.asarray(y, dtype=np.int64)
        t = np.asarray(t, dtype=np.float64)
        p = np.asarray(p, dtype=np.int64)
        order = np.argsort(t, kind="stable")
        x, y, t, p = x[order], y[order], t[order], p[order]
        if t_start is None:
            t_start = float(t[0]) if len(t) else 0.0
        if t_end is None:
            t_end = float(t[-1]) if len(t) else 0.0
        return cls(x, y, t, p, float(t_start), float(t_end), int(width), int(height))

    @classmethod
    def from_events(cls, events, width: int, height: int, **kw) -> "EventSlice":
        xs = [e.x for e in events]
        ys = [e.y for e in events]
        ts = [e.t for e in events]
        ps = [e.p for e in events]
        return cls.from_arrays(xs, ys, ts, ps, width, height, **kw)


def _detect_format(path: Path) -> str:
    with open(path, "rb") as f:
        head = f.read(4)
    return "binary" if head == EVT1_MAGIC else "csv"


def load_events(path, format: str = "auto", *, width: int | None = None, height: int | None = None) -> "EventSlice":
    """Read an event file and return a validated, time-sorted slice.

    ``format`` is "binary" (EVT1), "csv", or "auto" (sniff the magic).
    CSV carries no geometry header, so ``width``/``height`` are required
    for it. Unsorted records are repaired with a stable sort.
    """
    path = Path(path)
    if format == "auto":
        format = _detect_format(path)
    if format == "binary":
        return _load_evt1(path)
    if format == "csv":
        if width is None or height is None:
            raise ValueError("CSV carries no geometry; pass width and height")
        return _load_csv(path, width, height)
    raise ValueError(f"unknown format {format!r}")


def save_events(sl: EventSlice, path, format: str = "binary") -> None:
    """Write a slice in EVT1 or CSV form. EVT1 round-trips bit-exactly."""
    path = Path(path)
    if format == "binary":
        _save_evt1(sl, path)
    elif format == "csv":
        _save_csv(sl, path)
    else:
        raise ValueError(f"unknown format {format!r}")


def _load_evt1(path: Path) -> EventSlice:
    raw = path.read_bytes()
    if len(raw) < _HEADER_DTYPE.itemsize:
        raise EventFormatError(f"{path}: truncated header at byte {len(raw)}")
    header = np.frombuffer(raw, dtype=_HEADER_DTYPE, count=1)[0]
    if bytes(header["magic"]) != EVT1_MAGIC:
        raise EventFormatError(f"{path}: bad magic at byte 0")
    width, height = int(header["width"]), int(header["height"])
    count = int(header["count"])
    body_start = _HEADER_DTYPE.itemsize
    expected = body_start + count * _RECORD_DTYPE.itemsize
    if len(raw) < expected:
        raise EventFormatError(
            f"{path}: expected {count} records, file ends at byte {len(raw)} of {expected}"
        )
    rec = np.frombuffer(raw, dtype=_RECORD_DTYPE, count=count, offset=body_start)
    t = rec["t"].astype(np.float64)
    x = rec["x"].astype(np.int64)
    y = rec["y"].astype(np.int64)
    p = rec["p"].astype(np.int64)

    def _offset(i: int) -> int:
        return body_start + i * _RECORD_DTYPE.itemsize

    bad = np.flatnonzero(~np.isfinite(t))
    if bad.size:
        raise EventFormatError(f"{path}: non-finite timestamp at byte {_offset(bad[0])}")
    bad = np.flatnonzero((x >= width) | (y >= height))
    if bad.size:
        raise EventFormatError(f"{path}: out-of-bounds coordinate at byte {_offset(bad[0])}")
    bad = np.flatnonzero(np.abs(p) != 1)
    if bad.size:
        raise EventFormatError(f"{path}: invalid polarity at byte {_offset(bad[0])}")
    bad = np.flatnonzero((t < header["t_start"]) | (t > header["t_end"]))
    if bad.size:
        raise EventFormatError(f"{path}: timestamp outside header interval at byte {_offset(bad[0])}")
    return EventSlice.from_arrays(
        x, y, t, p, width, height, float(header["t_start"]), float(header["t_end"])
    )


def _save_evt1(sl: EventSlice, path: Path) -> None:
    header = np.zeros(1, dtype=_HEADER_DTYPE)
    header["magic"] = EVT1_MAGIC
    header["width"] = sl.width
    header["height"] = sl.height
    header["count"] = len(sl)
    header["t_start"] = sl.t_start
    header["t_end"] = sl.t_end
    rec = np.zeros(len(sl), dtype=_RECORD_DTYPE)
    rec["t"] = sl.t
    rec["x"] = sl.x
    rec["y"] = sl.y
    rec["p"] = sl.p
    with open(path, "wb") as f:
        f.write(header.tobytes())
        f.write(rec.tobytes())


def _load_csv(path: Path, width: int, height: int) -> EventSlice:
    xs, ys, ts, ps = [], [], [], []
    with open(path, "r") as f:
        first = f.readline()
        if first.strip().replace(" ", "") != "t,x,y,p":
            raise EventFormatError(f"{path}: line 1: expected header 't,x,y,p'")
        for lineno, line in enumerate(f, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 4:
                raise EventFormatError(f"{path}: line {lineno}: expected 4 fields")
            try:
                t = float(parts[0])
                x = int(parts[1])
                y = int(parts[2])
                p = int(parts[3])
            except ValueError as exc:
                raise EventFormatError(f"{path}: line {lineno}: {exc}") from exc
            if not np.isfinite(t):
                raise EventFormatError(f"{path}: line {lineno}: non-finite timestamp")
            if not (0 <= x < width and 0 <= y < height):
                raise EventFormatError(f"{path}: line {lineno}: out-of-bounds coordinate")
            if p not in (-1, 1):
                raise EventFormatError(f"{path}: line {lineno}: polarity must be +1 or -1")
            ts.append(t)
            xs.append(x)
            ys.append(y)
            ps.append(p)
    return EventSlice.from_arrays(xs, ys, ts, ps, width, height)


def _save_csv(sl: EventSlice, path: Path) -> None:
    buf = io.StringIO()
    buf.write("t,x,y,p\n")
    for t, x, y, p in zip(sl.t, sl.x, sl.y, sl.p):
        buf.write(f"{float(t)!r},{x},{y},{p}\n")
    Path(path).write_text(buf.getvalue())


@dataclass(frozen=True)
class VoxelGrid:
    """B x H x W event-count tensor with bilinear temporal voting."""

    bins: np.ndarray
    t_start: float
    t_end: float

    @property
    def n_bins(self) -> int:
        return self.bins.shape[0]


def build_voxel_grid(sl: EventSlice, n_bins: int) -> VoxelGrid:
    """Accumulate events into a temporal voxel grid.

    Each event votes bilinearly between the two nearest of ``n_bins`` bin
    centers placed at k/(B-1) in normalized time (all mass in bin 0 when
    B == 1), at its integer pixel. Total mass equals the event count.
    """
    if n_bins < 1:
        raise ValueError("n_bins must be >= 1")
    if sl.duration <= 0.0 and n_bins > 1 and len(sl) > 0:
        raise ValueError("degenerate time interval requires n_bins == 1")
    bins = np.zeros((n_bins, sl.height, sl.width), dtype=np.float64)
    if len(sl) == 0:
        return VoxelGrid(bins, sl.t_start, sl.t_end)
    tn = sl.normalized_times()
    if n_bins == 1:
        np.add.at(bins, (np.zeros(len(sl), dtype=np.int64), sl.y, sl.x), 1.0)
        return VoxelGrid(bins, sl.t_start, sl.t_end)
    pos = tn * (n_bins - 1)
    lo = np.clip(np.floor(pos).astype(np.int64), 0, n_bins - 2)
    frac = pos - lo
    np.add.at(bins, (lo, sl.y, sl.x), 1.0 - frac)
    np.add.at(bins, (lo + 1, sl.y, sl.x), frac)
    return VoxelGrid(bins, sl.t_start, sl.t_end)
