"""BSM trace parsing, validation, and per-vehicle feature windowing.

A trace is an ordered stream of basic safety messages (one row per message).
``windowize`` turns it into per-vehicle aggregate observations: message count
per interval (MVT), message frequency per second (MVS), and the great-circle
displacement between consecutive window positions.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import IO, Iterable, Iterator, Optional, Union

import numpy as np

from .geo import haversine_m, haversine_many

DEFAULT_WINDOW_LEN = 0.1

# Relative slack used when bucketing a timestamp into a window, so stamps
# sitting one float ulp below a grid boundary land in the intended window.
_WINDOW_EPS = 1e-9

REQUIRED_COLUMNS = ("timestamp", "vehicle_id", "latitude", "longitude", "speed")
OPTIONAL_COLUMNS = ("position_delta", "msg_rate")

TRACE_HEADER = REQUIRED_COLUMNS + OPTIONAL_COLUMNS


class TraceError(ValueError):
    """Base for all trace-level failures."""


class TraceParseError(TraceError):
    """A row could not be tokenized or converted (wrong arity, bad number)."""

    def __init__(self, message: str, line_no: int):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class FieldValidationError(TraceError):
    """A parsed value violates a field's range invariant."""

    def __init__(self, field: str, value: float, line_no: Optional[int] = None):
        where = f"line {line_no}: " if line_no is not None else ""
        super().__init__(f"{where}{field} out of range: {value!r}")
        self.field = field
        self.line_no = line_no


class TimestampOrderError(TraceError):
    """Timestamps in a trace decreased."""

    def __init__(self, prev_ts: float, ts: float, line_no: int):
        super().__init__(
            f"line {line_no}: timestamp {ts} earlier than preceding {prev_ts}"
        )
        self.line_no = line_no


class VehicleMismatchError(TraceError):
    """Two records expected to share a vehicle ID do not."""


@dataclass(frozen=True)
class BsmRecord:
    """One timestamped basic safety message from one vehicle."""

    timestamp: float
    vehicle_id: int
    latitude: float
    longitude: float
    speed: float
    msg_rate: Optional[float] = None

    def validate(self, line_no: Optional[int] = None) -> None:
        if not math.isfinite(self.timestamp) or self.timestamp < 0:
            raise FieldValidationError("timestamp", self.timestamp, line_no)
        if not -90.0 <= self.latitude <= 90.0:
            raise FieldValidationError("latitude", self.latitude, line_no)
        if not -180.0 <= self.longitude <= 180.0:
            raise FieldValidationError("longitude", self.longitude, line_no)
        if not math.isfinite(self.speed) or self.speed < 0:
            raise FieldValidationError("speed", self.speed, line_no)


@dataclass(slots=True)
class FeatureSample:
    """Per-vehicle aggregate observation over one time window."""

    vehicle_id: int
    window_start: float
    window_len: float
    mvs: float
    mvt: int
    displacement: float


def window_index(timestamp: float, window_len: float) -> int:
    """Index of the half-open window [k*w, (k+1)*w) containing ``timestamp``."""
    return int(math.floor(timestamp / window_len + _WINDOW_EPS))


def parse_trace(
    stream: Union[IO[str], IO[bytes]],
    delimiter: str = ",",
) -> Iterator[BsmRecord]:
    """Yield validated records from a header-bearing delimited text stream.

    Columns are keyed by header name, in any order; ``position_delta`` and
    ``msg_rate`` are optional. Raises ``TraceParseError`` for malformed rows,
    ``FieldValidationError`` for out-of-range values, ``TimestampOrderError``
    when timestamps decrease.
    """
    if isinstance(stream, io.BufferedIOBase) or (
        hasattr(stream, "mode") and "b" in getattr(stream, "mode", "")
    ):
        stream = io.TextIOWrapper(stream, encoding="utf-8")
    reader = csv.reader(stream, delimiter=delimiter)
    try:
        header = next(reader)
    except StopIteration:
        raise TraceParseError("missing header row", 1) from None
    columns = [name.strip().lower() for name in header]
    missing = [c for c in REQUIRED_COLUMNS if c not in columns]
    if missing:
        raise TraceParseError(f"missing required column(s): {', '.join(missing)}", 1)
    index = {name: i for i, name in enumerate(columns)}
    has_rate = "msg_rate" in index

    prev_ts: Optional[float] = None
    for line_no, row in enumerate(reader, start=2):
        if not row or all(not cell.strip() for cell in row):
            continue
        if len(row) != len(columns):
            raise TraceParseError(
                f"expected {len(columns)} fields, found {len(row)}", line_no
            )
        try:
            timestamp = float(row[index["timestamp"]])
            vehicle_id = int(float(row[index["vehicle_id"]]))
            latitude = float(row[index["latitude"]])
            longitude = float(row[index["longitude"]])
            speed = float(row[index["speed"]])
            rate_cell = row[index["msg_rate"]].strip() if has_rate else ""
            msg_rate = float(rate_cell) if rate_cell else None
        except ValueError as exc:
            raise TraceParseError(f"unparsable number ({exc})", line_no) from None
        record = BsmRecord(timestamp, vehicle_id, latitude, longitude, speed, msg_rate)
        record.validate(line_no)
        if prev_ts is not None and timestamp < prev_ts:
            raise TimestampOrderError(prev_ts, timestamp, line_no)
        prev_ts = timestamp
        yield record


def position_delta(prev: BsmRecord, curr: BsmRecord) -> float:
    """Great-circle displacement in meters between two reports of one vehicle."""
    if prev.vehicle_id != curr.vehicle_id:
        raise VehicleMismatchError(
            f"vehicle ids differ: {prev.vehicle_id} vs {curr.vehicle_id}"
        )
    return haversine_m(prev.latitude, prev.longitude, curr.latitude, curr.longitude)


class WindowColumns:
    """Columnar result of windowing: parallel arrays sorted by
    (window index, vehicle). ``first`` marks each vehicle's first window,
    whose displacement is a fill-in zero."""

    __slots__ = ("vehicle_id", "window_index", "window_start", "mvt", "mvs",
                 "displacement", "first", "window_len")

    def __init__(self, vehicle_id, window_idx, window_start, mvt, mvs,
                 displacement, first, window_len):
        self.vehicle_id = vehicle_id
        self.window_index = window_idx
        self.window_start = window_start
        self.mvt = mvt
        self.mvs = mvs
        self.displacement = displacement
        self.first = first
        self.window_len = window_len

    def __len__(self) -> int:
        return len(self.vehicle_id)


# window indices fit alongside vehicle ids in one int64 grouping key
_KEY_SHIFT = 31


def record_arrays(records) -> tuple:
    """(timestamp, vehicle_id, latitude, longitude) parallel arrays."""
    records = records if isinstance(records, list) else list(records)
    n = len(records)
    ts = np.fromiter((r.timestamp for r in records), float, count=n)
    vid = np.fromiter((r.vehicle_id for r in records), np.int64, count=n)
    lat = np.fromiter((r.latitude for r in records), float, count=n)
    lon = np.fromiter((r.longitude for r in records), float, count=n)
    return ts, vid, lat, lon


def window_columns(
    records: Iterable[BsmRecord],
    window_len: float = DEFAULT_WINDOW_LEN,
) -> WindowColumns:
    """Vectorized core of ``windowize``."""
    records = records if isinstance(records, list) else list(records)
    return window_columns_from_arrays(*record_arrays(records), window_len)


def window_columns_from_arrays(ts, vid, lat, lon, window_len) -> WindowColumns:
    if window_len <= 0:
        raise ValueError("window_len must be positive")
    n = len(ts)
    empty = np.empty(0)
    if n == 0:
        return WindowColumns(
            np.empty(0, np.int64), np.empty(0, np.int64), empty,
            np.empty(0, np.int64), empty, empty, np.empty(0, bool), window_len,
        )
    wi = np.floor(ts / window_len + _WINDOW_EPS).astype(np.int64)
    vid_base = int(vid.min())  # keep the packed key valid for any id range
    key = ((vid - vid_base) << _KEY_SHIFT) + wi
    order = np.argsort(key, kind="stable")
    uniq, start, counts = np.unique(key[order], return_index=True, return_counts=True)
    last = order[start + counts - 1]  # latest record of each (vehicle, window)

    g_vid = (uniq >> _KEY_SHIFT) + vid_base
    g_wi = uniq - ((uniq >> _KEY_SHIFT) << _KEY_SHIFT)
    g_lat = lat[last]
    g_lon = lon[last]

    same_vehicle = g_vid[1:] == g_vid[:-1]
    disp = np.zeros(len(uniq))
    if len(uniq) > 1:
        step = haversine_many(g_lat[:-1], g_lon[:-1], g_lat[1:], g_lon[1:])
        disp[1:] = np.where(same_vehicle, step, 0.0)
    first = np.concatenate(([True], ~same_vehicle))

    out = np.lexsort((g_vid, g_wi))
    return WindowColumns(
        vehicle_id=g_vid[out],
        window_idx=g_wi[out],
        window_start=g_wi[out] * window_len,
        mvt=counts[out],
        mvs=counts[out] / window_len,
        displacement=disp[out],
        first=first[out],
        window_len=window_len,
    )


def windowize(
    records: Iterable[BsmRecord],
    window_len: float = DEFAULT_WINDOW_LEN,
) -> list[FeatureSample]:
    """Aggregate a timestamp-sorted record stream into per-vehicle samples.

    One sample per (vehicle, window) containing at least one message, ordered
    by (window_start, vehicle_id). Displacement compares a window's last
    reported position with the vehicle's previous window's last position; the
    first sample of each vehicle has displacement 0. Vehicles appearing
    mid-trace are admitted with fresh state.
    """
    cols = window_columns(records, window_len)
    return [
        FeatureSample(
            vehicle_id=v,
            window_start=ws,
            window_len=window_len,
            mvs=mvs,
            mvt=mvt,
            displacement=d,
        )
        for v, ws, mvs, mvt, d in zip(
            cols.vehicle_id.tolist(),
            cols.window_start.tolist(),
            cols.mvs.tolist(),
            cols.mvt.tolist(),
            cols.displacement.tolist(),
        )
    ]


def write_trace(path, records: Iterable[BsmRecord]) -> None:
    """Write records as the canonical trace CSV, recomputing position_delta."""
    last_pos: dict[int, tuple[float, float]] = {}
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRACE_HEADER)
        for rec in records:
            prev = last_pos.get(rec.vehicle_id)
            if prev is None:
                delta = 0.0
            else:
                delta = haversine_m(prev[0], prev[1], rec.latitude, rec.longitude)
            last_pos[rec.vehicle_id] = (rec.latitude, rec.longitude)
            writer.writerow(
                [
                    repr(rec.timestamp),
                    rec.vehicle_id,
                    repr(rec.latitude),
                    repr(rec.longitude),
                    f"{rec.speed:.4f}",
                    f"{delta:.4f}",
                    "" if rec.msg_rate is None else f"{rec.msg_rate:.2f}",
                ]
            )


def read_trace(path) -> list[BsmRecord]:
    with open(path, "r", encoding="utf-8", newline="") as fh:
        return list(parse_trace(fh))
