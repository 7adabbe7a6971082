"""Event records, stream IO, and windowed accumulation.

An event stream is stored as structure-of-arrays (int64 nanosecond
timestamps, pixel coordinates, +-1 polarities). Windows into a stream are
1-based inclusive index pairs (k_start, k_end); the pair (k, k-1) denotes
the empty window. Accumulation turns a window into a signed image of
quantized log-intensity changes plus a coverage mask.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError

# Little-endian 16-byte record: u64 t_ns, u16 x, u16 y, i8 p, 3 zero pad bytes.
BINARY_RECORD_DTYPE = np.dtype(
    [("t", "<u8"), ("x", "<u2"), ("y", "<u2"), ("p", "i1"), ("pad", "V3")]
)


@dataclass(frozen=True)
class Event:
    """A single event: timestamp (ns), pixel column/row, polarity (+-1)."""

    t: int
    x: int
    y: int
    p: int

    def __post_init__(self):
        if self.p not in (-1, 1):
            raise DataError(f"polarity must be -1 or +1, got {self.p}")
        if self.t < 0 or self.x < 0 or self.y < 0:
            raise DataError(f"negative event field in {self!r}")


@dataclass
class ContrastThresholds:
    """Per-polarity contrast thresholds in log-intensity units."""

    delta_pos: float = 0.25
    delta_neg: float = 0.25

    def __post_init__(self):
        if not (self.delta_pos > 0 and self.delta_neg > 0):
            raise DataError(
                f"thresholds must be > 0, got ({self.delta_pos}, {self.delta_neg})"
            )


class EventStream:
    """Immutable time-sorted event sequence bound to a sensor resolution.

    Arrays are copied defensively on construction and validated:
    timestamps non-decreasing and non-negative, coordinates inside the
    sensor, polarities in {-1, +1}.
    """

    def __init__(self, t, x, y, p, resolution):
        self.t = np.ascontiguousarray(t, dtype=np.int64)
        self.x = np.ascontiguousarray(x, dtype=np.int32)
        self.y = np.ascontiguousarray(y, dtype=np.int32)
        self.p = np.ascontiguousarray(p, dtype=np.int8)
        self.resolution = (int(resolution[0]), int(resolution[1]))
        self._validate()

    def _validate(self):
        n = len(self.t)
        if not (len(self.x) == len(self.y) == len(self.p) == n):
            raise DataError("event field arrays have mismatched lengths")
        w, h = self.resolution
        if w <= 0 or h <= 0:
            raise DataError(f"invalid sensor resolution {self.resolution}")
        if n == 0:
            return
        if self.t[0] < 0:
            raise DataError("negative timestamp at index 0")
        steps = np.diff(self.t)
        if steps.size and steps.min() < 0:
            idx = int(np.argmax(steps < 0)) + 1
            raise DataError(f"non-monotone timestamp at index {idx}")
        bad = (self.x < 0) | (self.x >= w) | (self.y < 0) | (self.y >= h)
        if bad.any():
            idx = int(np.argmax(bad))
            raise DataError(
                f"event {idx} at ({self.x[idx]}, {self.y[idx]}) outside {w}x{h}"
            )
        ok = (self.p == 1) | (self.p == -1)
        if not ok.all():
            idx = int(np.argmax(~ok))
            raise DataError(f"event {idx} has polarity {self.p[idx]}, expected +-1")

    @classmethod
    def from_events(cls, events, resolution) -> "EventStream":
        events = list(events)
        return cls(
            t=[e.t for e in events],
            x=[e.x for e in events],
            y=[e.y for e in events],
            p=[e.p for e in events],
            resolution=resolution,
        )

    def __len__(self) -> int:
        return len(self.t)

    def __getitem__(self, k: int) -> Event:
        return Event(int(self.t[k]), int(self.x[k]), int(self.y[k]), int(self.p[k]))

    def __iter__(self):
        for k in range(len(self)):
            yield self[k]

    def __eq__(self, other) -> bool:
        if not isinstance(other, EventStream):
            return NotImplemented
        return (
            self.resolution == other.resolution
            and np.array_equal(self.t, other.t)
            and np.array_equal(self.x, other.x)
            and np.array_equal(self.y, other.y)
            and np.array_equal(self.p, other.p)
        )


@dataclass
class AccumulatedImage:
    """Signed per-pixel sum of quantized log-intensity changes over a window.

    mask is True exactly where at least one event landed; values are zero
    off-mask. dropped_events counts events whose undistortion remap left
    the frame.
    """

    values: np.ndarray
    mask: np.ndarray
    window: tuple[int, int]
    channel_aware: bool = False
    dropped_events: int = 0


def check_window(window, n: int) -> tuple[int, int]:
    """Validate a 1-based inclusive window against a stream of n events."""
    k_start, k_end = int(window[0]), int(window[1])
    if k_start < 1 or k_end > n or k_end < k_start - 1:
        raise DataError(f"window {window} out of range for stream of {n} events")
    return k_start, k_end


def accumulate_counts(stream: EventStream, window, undistort=None):
    """Per-pixel positive/negative event counts over a window.

    undistort, when given, is an int (H, W, 2) map of target (x, y) pixel
    per raw pixel, with -1 marking targets outside the frame; such events
    are dropped and tallied.

    Returns (pos_counts, neg_counts, mask, dropped).
    """
    k_start, k_end = check_window(window, len(stream))
    w, h = stream.resolution
    sl = slice(k_start - 1, k_end)
    x = stream.x[sl]
    y = stream.y[sl]
    p = stream.p[sl]
    dropped = 0
    if undistort is not None:
        tx = undistort[y, x, 0]
        ty = undistort[y, x, 1]
        keep = (tx >= 0) & (ty >= 0)
        dropped = int((~keep).sum())
        x, y, p = tx[keep], ty[keep], p[keep]
    flat = y.astype(np.int64) * w + x
    pos = np.bincount(flat[p > 0], minlength=w * h).reshape(h, w)
    neg = np.bincount(flat[p < 0], minlength=w * h).reshape(h, w)
    mask = (pos + neg) > 0
    return pos, neg, mask, dropped


def accumulate(
    stream: EventStream,
    window,
    thresholds: ContrastThresholds,
    undistort=None,
) -> AccumulatedImage:
    """Accumulate a window into a signed log-intensity change image.

    Each positive event deposits +delta_pos and each negative event
    -delta_neg at its (possibly remapped) pixel.
    """
    pos, neg, mask, dropped = accumulate_counts(stream, window, undistort)
    values = pos * thresholds.delta_pos - neg * thresholds.delta_neg
    return AccumulatedImage(
        values=values,
        mask=mask,
        window=(int(window[0]), int(window[1])),
        dropped_events=dropped,
    )


def sample_window(stream: EventStream, rng, min_frac: float, max_frac: float):
    """Sample a random window with length between min_frac*N and max_frac*N.

    Length is uniform over the rounded integer range (at least 1) and the
    start index is uniform over its valid positions.
    """
    n = len(stream)
    if n == 0:
        raise DataError("cannot sample a window from an empty stream")
    if not (0 < min_frac <= max_frac <= 1):
        raise DataError(f"invalid window fractions ({min_frac}, {max_frac})")
    lo = max(1, int(round(min_frac * n)))
    hi = max(lo, min(n, int(round(max_frac * n))))
    length = int(rng.integers(lo, hi + 1))
    k_start = int(rng.integers(1, n - length + 2))
    return k_start, k_start + length - 1


def _read_events_csv(path) -> tuple[np.ndarray, ...]:
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split(",")
            if lineno == 1 and not parts[0].strip().lstrip("-").isdigit():
                continue  # optional header line
            if len(parts) != 4:
                raise DataError(f"{path}:{lineno}: expected 4 fields, got {len(parts)}")
            try:
                t = int(parts[0])
                x = int(parts[1])
                y = int(parts[2])
                p = int(parts[3])
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from exc
            rows.append((t, x, y, p))
    if rows:
        arr = np.array(rows, dtype=np.int64)
        return arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3]
    return (np.zeros(0, np.int64),) * 4


def _read_events_binary(path) -> tuple[np.ndarray, ...]:
    raw = Path(path).read_bytes()
    if len(raw) % BINARY_RECORD_DTYPE.itemsize != 0:
        raise DataError(
            f"{path}: size {len(raw)} not a multiple of "
            f"{BINARY_RECORD_DTYPE.itemsize}-byte records "
            f"(trailing garbage at offset {len(raw) - len(raw) % 16})"
        )
    rec = np.frombuffer(raw, dtype=BINARY_RECORD_DTYPE)
    return (
        rec["t"].astype(np.int64),
        rec["x"].astype(np.int64),
        rec["y"].astype(np.int64),
        rec["p"].astype(np.int64),
    )


def read_events(path, resolution=None) -> EventStream:
    """Read an event stream from .csv (text) or .bin (16-byte records).

    When resolution is not given it is inferred as (max_x + 1, max_y + 1).
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"event file not found: {path}")
    if path.suffix.lower() == ".csv":
        t, x, y, p = _read_events_csv(path)
    else:
        t, x, y, p = _read_events_binary(path)
    if resolution is None:
        if len(x) == 0:
            raise DataError(f"{path}: cannot infer resolution from an empty stream")
        resolution = (int(x.max()) + 1, int(y.max()) + 1)
    return EventStream(t, x, y, p, resolution)


def write_events(stream: EventStream, path) -> None:
    """Write a stream to .csv or .bin, matching read_events round-trip."""
    path = Path(path)
    if path.suffix.lower() == ".csv":
        buf = io.StringIO()
        buf.write("t_ns,x,y,p\n")
        for k in range(len(stream)):
            buf.write(f"{stream.t[k]},{stream.x[k]},{stream.y[k]},{stream.p[k]}\n")
        path.write_text(buf.getvalue(), encoding="utf-8")
        return
    w, h = stream.resolution
    if w > 0xFFFF or h > 0xFFFF:
        raise DataError("binary format supports at most 65536x65536 sensors")
    rec = np.zeros(len(stream), dtype=BINARY_RECORD_DTYPE)
    rec["t"] = stream.t
    rec["x"] = stream.x
    rec["y"] = stream.y
    rec["p"] = stream.p
    path.write_bytes(rec.tobytes())
