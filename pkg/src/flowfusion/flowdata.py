"""Flow-data ingestion: raw geolocated cellular-traffic records, camera
vehicle counts, interval aggregation, statistics, correlation,
normalization, chronological splitting, and sliding windows.

Matrices are stored [T x nodes] with NaN marking a missing cell (gap).
Gaps are excluded from statistics and correlation rather than zero
filled. Timestamps are naive local time; the data is single-city.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from datetime import date, datetime, time, timedelta
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

METERS_PER_DEG_LAT = 111194.92664455873  # 2*pi*R/360 with R = 6371 km

MATRIX_TIME_FORMAT = "%Y-%m-%d %H:%M"
RECORD_TIME_FORMATS = ("%Y-%m-%d %H:%M:%S", "%H:%M:%S")


class FlowDataError(ValueError):
    pass


class FlowKind(str, Enum):
    GCT = "gct"
    VEHICLE = "vehicle"


# ---------------------------------------------------------------------------
# Domain types


@dataclass(frozen=True)
class GctRecord:
    """One cellular-traffic record with its originating GPS coordinates."""

    timestamp: datetime
    device_id: str
    latitude: float
    longitude: float


@dataclass(frozen=True)
class RoadSegment:
    """A square collection box (default 20m x 20m) centred on a roadway."""

    segment_id: int
    center_lat: float
    center_lon: float
    half_width_m: float = 10.0


@dataclass
class FlowMatrix:
    interval_start_times: list[datetime]
    node_ids: list[str]
    values: np.ndarray  # [T, nodes], float64, NaN = gap
    interval_minutes: int = 5
    kind: FlowKind = FlowKind.GCT

    def validate(self) -> "FlowMatrix":
        self.values = np.asarray(self.values, dtype=np.float64)
        t, n = self.values.shape
        if t != len(self.interval_start_times) or n != len(self.node_ids):
            raise FlowDataError(
                f"values shape {self.values.shape} does not match "
                f"{len(self.interval_start_times)} times x {len(self.node_ids)} nodes"
            )
        step = timedelta(minutes=self.interval_minutes)
        times = self.interval_start_times
        for i in range(1, t):
            if times[i] <= times[i - 1]:
                raise FlowDataError(f"timestamps not strictly increasing at row {i}")
            same_day = times[i].date() == times[i - 1].date()
            if same_day and times[i] - times[i - 1] != step:
                raise FlowDataError(
                    f"irregular spacing at row {i}: {times[i - 1]} -> {times[i]} "
                    f"(expected {self.interval_minutes} minutes)"
                )
        finite = self.values[np.isfinite(self.values)]
        if finite.size and finite.min() < 0:
            r, c = np.argwhere(np.nan_to_num(self.values, nan=0.0) < 0)[0]
            raise FlowDataError(
                f"negative count {self.values[r, c]} at row {r} "
                f"({times[r]}), column {self.node_ids[c]}"
            )
        return self

    @property
    def n_nodes(self) -> int:
        return len(self.node_ids)

    @property
    def n_intervals(self) -> int:
        return len(self.interval_start_times)

    def node_index(self, node_id: str) -> int:
        try:
            return self.node_ids.index(str(node_id))
        except ValueError:
            raise FlowDataError(f"unknown node id {node_id!r}") from None

    def gap_count(self) -> int:
        return int(np.isnan(self.values).sum())


@dataclass(frozen=True)
class CameraMapping:
    """camera_id -> segment_id pairs; cameras are sparse (M < N)."""

    entries: tuple[tuple[str, int], ...]

    @property
    def camera_ids(self) -> list[str]:
        return [c for c, _ in self.entries]

    def segment_of(self, camera_id: str) -> int:
        for cam, seg in self.entries:
            if cam == camera_id:
                return seg
        raise FlowDataError(f"unknown camera id {camera_id!r}")

    def without(self, camera_id: str) -> "CameraMapping":
        kept = tuple(e for e in self.entries if e[0] != camera_id)
        if len(kept) == len(self.entries):
            raise FlowDataError(f"unknown camera id {camera_id!r}")
        return CameraMapping(kept)

    def validate(self, gct_node_ids: Sequence[str], veh_node_ids: Sequence[str] | None = None) -> "CameraMapping":
        cams = self.camera_ids
        if len(set(cams)) != len(cams):
            raise FlowDataError("duplicate camera ids in mapping")
        for cam, seg in self.entries:
            if str(seg) not in [str(n) for n in gct_node_ids]:
                raise FlowDataError(f"camera {cam} maps to unknown segment {seg}")
        if len(self.entries) >= len(gct_node_ids):
            raise FlowDataError(
                f"expected sparse cameras: {len(self.entries)} cameras vs "
                f"{len(gct_node_ids)} segments"
            )
        if veh_node_ids is not None and list(veh_node_ids) != cams:
            raise FlowDataError(
                f"vehicle node order {list(veh_node_ids)} does not match mapping order {cams}"
            )
        return self


@dataclass(frozen=True)
class TaskSpec:
    n_gct_nodes: int
    n_vehicle_nodes: int
    input_steps: int
    output_steps: int
    interval_minutes: int = 5

    def __post_init__(self):
        if not (self.n_gct_nodes > self.n_vehicle_nodes >= 1):
            raise FlowDataError(
                f"need N > M >= 1, got N={self.n_gct_nodes} M={self.n_vehicle_nodes}"
            )
        if self.input_steps < 1 or self.output_steps < 1:
            raise FlowDataError("input_steps and output_steps must be >= 1")


@dataclass
class Normalizer:
    per_node_mean: np.ndarray
    per_node_std: np.ndarray  # zero-variance nodes replaced by epsilon
    epsilon: float = 1e-8
    flagged_nodes: list[str] = field(default_factory=list)


# ---------------------------------------------------------------------------
# Raw record parsing


@dataclass(frozen=True)
class ParseError:
    line_number: int
    reason: str
    line: str


@dataclass
class ParseResult:
    records: list[GctRecord]
    errors: list[ParseError]


def _parse_record_time(text: str) -> datetime:
    for fmt in RECORD_TIME_FORMATS:
        try:
            return datetime.strptime(text, fmt)
        except ValueError:
            continue
    raise ValueError(f"unparseable timestamp {text!r}")


def _looks_like_raw_imei(device_id: str) -> bool:
    # raw IMEI / IMEISV are 14-17 digit strings; inputs must arrive hashed
    return device_id.isdigit() and 14 <= len(device_id) <= 17


def parse_gct_records(source: Iterable[str]) -> ParseResult:
    """Parse comma-delimited ``time,imei_hash,lat,lon`` lines.

    Malformed lines are collected into the error report rather than
    silently dropped; surviving records keep file order.
    """
    records: list[GctRecord] = []
    errors: list[ParseError] = []
    for lineno, raw in enumerate(source, start=1):
        line = raw.strip()
        if not line:
            continue
        if lineno == 1 and line.lower().replace(" ", "") in ("time,imei_hash,lat,lon",):
            continue
        parts = [p.strip() for p in line.split(",")]
        if len(parts) != 4:
            errors.append(ParseError(lineno, f"expected 4 fields, got {len(parts)}", line))
            continue
        ts_text, device_id, lat_text, lon_text = parts
        try:
            ts = _parse_record_time(ts_text)
            lat = float(lat_text)
            lon = float(lon_text)
        except ValueError as exc:
            errors.append(ParseError(lineno, str(exc), line))
            continue
        if not -90.0 <= lat <= 90.0:
            errors.append(ParseError(lineno, f"latitude {lat} out of range [-90, 90]", line))
            continue
        if not -180.0 <= lon <= 180.0:
            errors.append(ParseError(lineno, f"longitude {lon} out of range [-180, 180]", line))
            continue
        if not device_id:
            errors.append(ParseError(lineno, "empty device id", line))
            continue
        if _looks_like_raw_imei(device_id):
            errors.append(ParseError(lineno, "device id looks like a raw IMEI (must be hashed)", line))
            continue
        records.append(GctRecord(ts, device_id, lat, lon))
    return ParseResult(records, errors)


# ---------------------------------------------------------------------------
# Aggregation


def _box_contains(seg: RoadSegment, lat: float, lon: float) -> bool:
    dlat_m = abs(lat - seg.center_lat) * METERS_PER_DEG_LAT
    dlon_m = abs(lon - seg.center_lon) * METERS_PER_DEG_LAT * math.cos(math.radians(seg.center_lat))
    return dlat_m <= seg.half_width_m and dlon_m <= seg.half_width_m


def day_interval_count(day_start: time, day_end: time, interval_minutes: int) -> int:
    span = (day_end.hour - day_start.hour) * 60 + (day_end.minute - day_start.minute)
    if span <= 0 or span % interval_minutes:
        raise FlowDataError(
            f"interval of {interval_minutes} minutes does not divide the "
            f"{day_start}-{day_end} day window"
        )
    return span // interval_minutes


@dataclass
class AggregationResult:
    flows: FlowMatrix
    total_records: int
    discarded: int  # outside every box or outside the day window
    multi_box_hits: int  # records on shared box edges, resolved to lowest id


def aggregate_gct_flow(
    records: Sequence[GctRecord],
    segments: Sequence[RoadSegment],
    interval_minutes: int = 5,
    day_window: tuple[time, time] = (time(6, 0), time(19, 0)),
) -> AggregationResult:
    """Count records per (interval, segment) cell over a daily grid.

    Intervals are half-open [t, t + interval). A record on a shared box
    edge belongs to the lowest segment_id that contains it. Records
    outside every box or outside the day window go to the discard tally,
    so cell sum + discards = total records.
    """
    if not segments:
        raise FlowDataError("no segments given")
    ids = [s.segment_id for s in segments]
    if len(set(ids)) != len(ids):
        raise FlowDataError(f"duplicate segment ids: {sorted(ids)}")
    day_start, day_end = day_window
    per_day = day_interval_count(day_start, day_end, interval_minutes)
    by_id = sorted(segments, key=lambda s: s.segment_id)
    col_of = {s.segment_id: i for i, s in enumerate(segments)}

    days = sorted({r.timestamp.date() for r in records})
    day_row = {d: i * per_day for i, d in enumerate(days)}
    values = np.zeros((per_day * len(days), len(segments)))
    discarded = 0
    multi_box = 0
    for rec in records:
        t = rec.timestamp.time()
        if not (day_start <= t < day_end):
            discarded += 1
            continue
        minutes = (t.hour - day_start.hour) * 60 + (t.minute - day_start.minute)
        idx = day_row[rec.timestamp.date()] + minutes // interval_minutes
        hits = [s for s in by_id if _box_contains(s, rec.latitude, rec.longitude)]
        if not hits:
            discarded += 1
            continue
        if len(hits) > 1:
            multi_box += 1
        values[idx, col_of[hits[0].segment_id]] += 1
    if multi_box:
        warnings.warn(
            f"{multi_box} records fell in overlapping segment boxes; "
            "assigned to the lowest segment id",
            stacklevel=2,
        )
    times = [
        datetime.combine(d, day_start) + timedelta(minutes=interval_minutes * i)
        for d in days
        for i in range(per_day)
    ]
    flows = FlowMatrix(times, [str(s.segment_id) for s in segments], values,
                       interval_minutes, FlowKind.GCT).validate()
    return AggregationResult(flows, len(records), discarded, multi_box)


def merge_flow_matrices(parts: Sequence[FlowMatrix]) -> FlowMatrix:
    """Cell-wise sum of shard aggregations over an identical grid."""
    first = parts[0]
    total = first.values.copy()
    for part in parts[1:]:
        if (part.interval_start_times != first.interval_start_times
                or part.node_ids != first.node_ids):
            raise FlowDataError("cannot merge flow matrices on different grids")
        total += part.values
    return FlowMatrix(list(first.interval_start_times), list(first.node_ids), total,
                      first.interval_minutes, first.kind).validate()


# ---------------------------------------------------------------------------
# File I/O


def load_flow_matrix(path, kind: FlowKind, interval_minutes: int = 5) -> FlowMatrix:
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise FlowDataError(f"{path}: empty file") from None
        if not header or header[0].strip().lower() != "time":
            raise FlowDataError(f"{path}: first header column must be 'Time', got {header[:1]}")
        node_ids = [h.strip() for h in header[1:]]
        if not node_ids:
            raise FlowDataError(f"{path}: no node columns")
        times: list[datetime] = []
        rows: list[list[float]] = []
        for lineno, row in enumerate(reader, start=2):
            if not row or not any(cell.strip() for cell in row):
                continue
            if len(row) != len(node_ids) + 1:
                raise FlowDataError(
                    f"{path}:{lineno}: expected {len(node_ids) + 1} columns, got {len(row)}"
                )
            try:
                times.append(datetime.strptime(row[0].strip(), MATRIX_TIME_FORMAT))
            except ValueError as exc:
                raise FlowDataError(f"{path}:{lineno}: {exc}") from None
            vals = []
            for col, cell in enumerate(row[1:]):
                cell = cell.strip()
                if not cell:
                    vals.append(np.nan)  # gap: recorded, surfaced via gap_count
                    continue
                try:
                    v = float(cell)
                except ValueError:
                    raise FlowDataError(
                        f"{path}:{lineno}: non-numeric count {cell!r} in column "
                        f"{node_ids[col]}"
                    ) from None
                if v < 0:
                    raise FlowDataError(
                        f"{path}:{lineno}: negative count {cell} in column {node_ids[col]}"
                    )
                vals.append(v)
            rows.append(vals)
    if not rows:
        raise FlowDataError(f"{path}: no data rows")
    matrix = FlowMatrix(times, node_ids, np.asarray(rows, dtype=np.float64),
                        interval_minutes, kind)
    try:
        return matrix.validate()
    except FlowDataError as exc:
        raise FlowDataError(f"{path}: {exc}") from None


def save_flow_matrix(flows: FlowMatrix, path) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["Time", *flows.node_ids])
        for i, ts in enumerate(flows.interval_start_times):
            row = [ts.strftime(MATRIX_TIME_FORMAT)]
            for v in flows.values[i]:
                if np.isnan(v):
                    row.append("")
                elif float(v).is_integer():
                    row.append(str(int(v)))
                else:
                    row.append(repr(float(v)))
            writer.writerow(row)


def load_camera_mapping(path) -> CameraMapping:
    path = Path(path)
    entries: list[tuple[str, int]] = []
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip().lower() for h in header] != ["camera_id", "segment_id"]:
            raise FlowDataError(f"{path}: expected header 'camera_id,segment_id', got {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row or not any(c.strip() for c in row):
                continue
            if len(row) != 2:
                raise FlowDataError(f"{path}:{lineno}: expected 2 columns")
            entries.append((row[0].strip(), int(row[1])))
    return CameraMapping(tuple(entries))


def save_camera_mapping(mapping: CameraMapping, path) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["camera_id", "segment_id"])
        for cam, seg in mapping.entries:
            writer.writerow([cam, seg])


def load_segments(path, half_width_m: float = 10.0) -> list[RoadSegment]:
    path = Path(path)
    segments: list[RoadSegment] = []
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip().lower() for h in header] != ["segment_id", "lat", "lon"]:
            raise FlowDataError(f"{path}: expected header 'segment_id,lat,lon', got {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row or not any(c.strip() for c in row):
                continue
            if len(row) != 3:
                raise FlowDataError(f"{path}:{lineno}: expected 3 columns")
            segments.append(RoadSegment(int(row[0]), float(row[1]), float(row[2]), half_width_m))
    ids = [s.segment_id for s in segments]
    if len(set(ids)) != len(ids):
        raise FlowDataError(f"{path}: duplicate segment ids")
    return segments


def save_segments(segments: Sequence[RoadSegment], path) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["segment_id", "lat", "lon"])
        for seg in segments:
            writer.writerow([seg.segment_id, repr(seg.center_lat), repr(seg.center_lon)])


# ---------------------------------------------------------------------------
# Statistics and correlation


@dataclass
class FlowStats:
    sample_count: int
    node_count: int
    mean: float
    std: float  # population convention over all non-gap cells
    per_node_mean: dict[str, float]
    per_node_std: dict[str, float]
    max_node: tuple[str, float]
    min_node: tuple[str, float]


def descriptive_stats(flows: FlowMatrix) -> FlowStats:
    if flows.values.size == 0:
        raise FlowDataError("empty flow matrix")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)  # all-gap columns
        mean = float(np.nanmean(flows.values))
        std = float(np.nanstd(flows.values))  # population: divide by count
        node_means = np.nanmean(flows.values, axis=0)
        node_stds = np.nanstd(flows.values, axis=0)
    per_node = {nid: float(m) for nid, m in zip(flows.node_ids, node_means)}
    finite = {k: v for k, v in per_node.items() if np.isfinite(v)}
    if not finite:
        raise FlowDataError("all cells are gaps")
    max_id = max(finite, key=finite.get)
    min_id = min(finite, key=finite.get)
    return FlowStats(
        sample_count=flows.n_intervals,
        node_count=flows.n_nodes,
        mean=mean,
        std=std,
        per_node_mean=per_node,
        per_node_std={nid: float(s) for nid, s in zip(flows.node_ids, node_stds)},
        max_node=(max_id, finite[max_id]),
        min_node=(min_id, finite[min_id]),
    )


def pearson_r(x: np.ndarray, y: np.ndarray) -> float:
    """Closed-form Pearson correlation; NaN when undefined."""
    ok = np.isfinite(x) & np.isfinite(y)
    x, y = x[ok], y[ok]
    if x.size < 2:
        return float("nan")
    dx = x - x.mean()
    dy = y - y.mean()
    sx = float((dx * dx).sum())
    sy = float((dy * dy).sum())
    if sx == 0.0 or sy == 0.0:
        return float("nan")
    return float((dx * dy).sum() / math.sqrt(sx * sy))


@dataclass
class DailyCorrelation:
    days: list[date]
    camera_ids: list[str]
    values: np.ndarray  # [days, cameras], NaN = undefined


def daily_pearson(gct: FlowMatrix, veh: FlowMatrix, mapping: CameraMapping) -> DailyCorrelation:
    if gct.interval_start_times != veh.interval_start_times:
        raise FlowDataError("flow matrices do not share an interval grid")
    mapping.validate(gct.node_ids, veh.node_ids)
    dates = sorted({t.date() for t in gct.interval_start_times})
    day_of = np.asarray([dates.index(t.date()) for t in gct.interval_start_times])
    out = np.full((len(dates), len(mapping.entries)), np.nan)
    for j, (cam, seg) in enumerate(mapping.entries):
        g = gct.values[:, gct.node_index(str(seg))]
        v = veh.values[:, veh.node_index(cam)]
        for i in range(len(dates)):
            rows = day_of == i
            out[i, j] = pearson_r(g[rows], v[rows])
    return DailyCorrelation(dates, mapping.camera_ids, out)


# ---------------------------------------------------------------------------
# Normalization, splitting, windowing


def fit_normalizer(flows: FlowMatrix, train_rows: range, epsilon: float = 1e-8) -> Normalizer:
    if len(train_rows) == 0:
        raise FlowDataError("empty training range")
    block = flows.values[train_rows.start : train_rows.stop]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        mean = np.nanmean(block, axis=0)
        std = np.nanstd(block, axis=0)
    flagged = [nid for nid, s in zip(flows.node_ids, std) if not s > 0]
    std = np.where(std > 0, std, epsilon)
    mean = np.nan_to_num(mean, nan=0.0)
    return Normalizer(mean, std, epsilon, flagged)


def apply_normalizer(norm: Normalizer, values: np.ndarray) -> np.ndarray:
    """Z-score along the trailing node axis convention [..., nodes, T]."""
    return (values - norm.per_node_mean[:, None]) / norm.per_node_std[:, None]


def invert_normalizer(norm: Normalizer, values: np.ndarray) -> np.ndarray:
    return values * norm.per_node_std[:, None] + norm.per_node_mean[:, None]


def chronological_split(flows: FlowMatrix, ratios: tuple[float, float, float]) -> tuple[range, range, range]:
    """Contiguous train/val/test row ranges; floor allocation, remainder to train."""
    if any(r <= 0 for r in ratios):
        raise FlowDataError(f"ratios must be positive, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise FlowDataError(f"ratios must sum to 1, got {sum(ratios)}")
    t = flows.n_intervals
    n_val = int(t * ratios[1])
    n_test = int(t * ratios[2])
    n_train = t - n_val - n_test
    if min(n_train, n_val, n_test) < 1:
        raise FlowDataError(
            f"split of {t} rows with ratios {ratios} leaves an empty range "
            f"({n_train}/{n_val}/{n_test})"
        )
    return (range(0, n_train), range(n_train, n_train + n_val), range(n_train + n_val, t))


def window_starts(
    times: Sequence[datetime],
    rows: range,
    input_steps: int,
    output_steps: int,
    mask_day_boundaries: bool = True,
) -> list[int]:
    """Sliding stride-1 window start indices fully inside ``rows``.

    With masking on (the default: the data has a nightly gap), a window
    may not span a calendar-day boundary.
    """
    span = input_steps + output_steps
    starts = []
    for s in range(rows.start, rows.stop - span + 1):
        if mask_day_boundaries and times[s].date() != times[s + span - 1].date():
            continue
        starts.append(s)
    return starts


def make_windows(
    flows: FlowMatrix,
    task: TaskSpec,
    rows: range,
    mask_day_boundaries: bool = True,
) -> list[tuple[np.ndarray, np.ndarray]]:
    """(input [nodes x T_in], target [nodes x T_out]) pairs.

    Windows containing gaps are dropped; on gap-free data the count is
    range_length - T_in - T_out + 1 per contiguous day run.
    """
    span = task.input_steps + task.output_steps
    if len(rows) < span:
        warnings.warn(
            f"range of {len(rows)} rows too short for windows of {span} steps",
            stacklevel=2,
        )
        return []
    out = []
    for s in window_starts(flows.interval_start_times, rows, task.input_steps,
                           task.output_steps, mask_day_boundaries):
        block = flows.values[s : s + span]
        if np.isnan(block).any():
            continue
        out.append((block[: task.input_steps].T.copy(),
                    block[task.input_steps :].T.copy()))
    return out
