"""GPS trace ingestion: parsing, daily rasterization, imputation, scaling and windowing."""
from __future__ import annotations

import csv
import datetime as dt
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

HISTORY_DAYS = 14
HORIZON = 7
WINDOW_DAYS = HISTORY_DAYS + HORIZON

GEOLIFE_UTC_OFFSET = dt.timedelta(hours=8)

# Festival days of 2009 falling inside the GeoLife study period (weekday-only ones
# change the weekend/holiday tally; Qingming 04-04 is a Saturday anyway).
CN_HOLIDAYS_2009 = (
    dt.date(2009, 1, 1),
    dt.date(2009, 1, 26),
    dt.date(2009, 4, 4),
    dt.date(2009, 5, 1),
    dt.date(2009, 5, 28),
    dt.date(2009, 10, 1),
)


class TraceParseError(ValueError):
    pass


class ValidationError(ValueError):
    pass


class ImputationError(ValueError):
    pass


class InsufficientDataError(ValueError):
    pass


@dataclass(frozen=True)
class TracePoint:
    user_id: str
    timestamp: dt.datetime  # timezone-aware, UTC
    lat: float
    lon: float

    def __post_init__(self):
        if not -90.0 <= self.lat <= 90.0:
            raise ValidationError(f"latitude out of range: {self.lat}")
        if not -180.0 <= self.lon <= 180.0:
            raise ValidationError(f"longitude out of range: {self.lon}")


def _is_pow2(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


@dataclass(frozen=True)
class GridSpec:
    lat_min: float
    lat_max: float
    lon_min: float
    lon_max: float
    rows: int
    cols: int

    def __post_init__(self):
        if not self.lat_min < self.lat_max:
            raise ValidationError("lat_min must be < lat_max")
        if not self.lon_min < self.lon_max:
            raise ValidationError("lon_min must be < lon_max")
        if not (_is_pow2(self.rows) and _is_pow2(self.cols)):
            raise ValidationError(f"grid dimensions must be powers of two, got {self.rows}x{self.cols}")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.rows, self.cols)

    def cell_of(self, lat: float, lon: float) -> tuple[int, int] | None:
        """Return (row, col) for a coordinate, row 0 being the northmost band.

        Cells are half-open towards higher indices; the southern and eastern
        outer edges are closed so the bbox boundary itself is inside the grid.
        """
        if not (self.lat_min <= lat <= self.lat_max and self.lon_min <= lon <= self.lon_max):
            return None
        r = int(math.floor((self.lat_max - lat) / (self.lat_max - self.lat_min) * self.rows))
        c = int(math.floor((lon - self.lon_min) / (self.lon_max - self.lon_min) * self.cols))
        return min(r, self.rows - 1), min(c, self.cols - 1)


@dataclass
class VisitCountRaster:
    day_index: int
    date: dt.date
    counts: np.ndarray
    dropped: int = 0

    def __post_init__(self):
        if np.any(self.counts < 0):
            raise ValidationError("visit counts must be non-negative")


@dataclass
class DailySeries:
    user_id: str
    grid: GridSpec
    rasters: list[VisitCountRaster]
    scale_max: float | None = None
    imputed: set[int] = field(default_factory=set)

    def __len__(self):
        return len(self.rasters)

    @property
    def dates(self) -> list[dt.date]:
        return [r.date for r in self.rasters]

    def stack(self) -> np.ndarray:
        """(days, M, N) array of the counts."""
        return np.stack([r.counts for r in self.rasters])


@dataclass(frozen=True)
class ExtFeature:
    date: dt.date
    is_weekend: int
    work_reported: int

    def as_vector(self) -> list[float]:
        return [float(self.is_weekend), float(self.work_reported)]


@dataclass
class SupervisedWindow:
    week_a: list[VisitCountRaster]
    week_b: list[VisitCountRaster]
    target: list[VisitCountRaster]
    ext: list[ExtFeature]

    @property
    def last_observed(self) -> VisitCountRaster:
        return self.week_b[-1]


# --------------------------------------------------------------------------- parsing


def parse_geolife_plt(path, user_id: str) -> list[TracePoint]:
    """Read a GeoLife ``.plt`` trajectory file.

    The first six lines are headers. Data lines are
    ``lat,lon,0,altitude,serial_date,YYYY-MM-DD,HH:MM:SS``; timestamps are UTC.
    """
    path = Path(path)
    points = []
    with path.open("r", encoding="utf-8", errors="replace") as fh:
        for lineno, line in enumerate(fh, start=1):
            if lineno <= 6:
                continue
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 7:
                raise TraceParseError(f"{path}:{lineno}: expected 7 fields, got {len(parts)}")
            try:
                lat = float(parts[0])
                lon = float(parts[1])
                ts = dt.datetime.strptime(f"{parts[5]} {parts[6]}", "%Y-%m-%d %H:%M:%S")
            except ValueError as exc:
                raise TraceParseError(f"{path}:{lineno}: {exc}") from exc
            try:
                points.append(TracePoint(user_id, ts.replace(tzinfo=dt.timezone.utc), lat, lon))
            except ValidationError as exc:
                raise TraceParseError(f"{path}:{lineno}: {exc}") from exc
    return points


CSV_COLUMNS = ("user_id", "timestamp", "lat", "lon")


def _parse_iso(value: str) -> dt.datetime:
    value = value.strip()
    if value.endswith("Z"):
        value = value[:-1] + "+00:00"
    ts = dt.datetime.fromisoformat(value)
    if ts.tzinfo is None:
        ts = ts.replace(tzinfo=dt.timezone.utc)
    return ts.astimezone(dt.timezone.utc)


def parse_csv_trace(path) -> list[TracePoint]:
    """Read a ``user_id,timestamp,lat,lon`` CSV; points are sorted by time within each user."""
    path = Path(path)
    points = []
    with path.open("r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in CSV_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise ValidationError(f"{path}: missing column(s) {', '.join(missing)}")
        for rowno, row in enumerate(reader, start=2):
            try:
                ts = _parse_iso(row["timestamp"])
                points.append(TracePoint(row["user_id"], ts, float(row["lat"]), float(row["lon"])))
            except ValueError as exc:
                raise ValidationError(f"{path}: row {rowno}: {exc}") from exc
    points.sort(key=lambda p: (p.user_id, p.timestamp))
    return points


def write_csv_trace(points: Iterable[TracePoint], path) -> None:
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for p in points:
            w.writerow([p.user_id, p.timestamp.isoformat(), repr(p.lat), repr(p.lon)])


# ----------------------------------------------------------------------- rasterizing


def local_date(ts: dt.datetime, utc_offset: dt.timedelta = GEOLIFE_UTC_OFFSET) -> dt.date:
    return (ts.astimezone(dt.timezone.utc) + utc_offset).date()


def rasterize_day(points: Sequence[TracePoint], grid: GridSpec, day_index: int = 0,
                  date: dt.date | None = None) -> VisitCountRaster:
    counts = np.zeros(grid.shape, dtype=np.float64)
    dropped = 0
    for p in points:
        cell = grid.cell_of(p.lat, p.lon)
        if cell is None:
            dropped += 1
        else:
            counts[cell] += 1
    return VisitCountRaster(day_index, date or dt.date(1970, 1, 1), counts, dropped)


def bucket_days(points: Sequence[TracePoint], utc_offset: dt.timedelta = GEOLIFE_UTC_OFFSET,
                start: dt.date | None = None, end: dt.date | None = None) -> dict[dt.date, list[TracePoint]]:
    """Group points by local civil date, optionally restricted to [start, end]."""
    days: dict[dt.date, list[TracePoint]] = {}
    for p in points:
        d = local_date(p.timestamp, utc_offset)
        if (start and d < start) or (end and d > end):
            continue
        days.setdefault(d, []).append(p)
    return dict(sorted(days.items()))


def build_series(points: Sequence[TracePoint], grid: GridSpec, user_id: str | None = None,
                 utc_offset: dt.timedelta = GEOLIFE_UTC_OFFSET, start: dt.date | None = None,
                 end: dt.date | None = None) -> DailySeries:
    """Rasterize every observed day; gaps are left for :func:`impute_missing`."""
    buckets = bucket_days(points, utc_offset, start, end)
    if not buckets:
        raise InsufficientDataError("no trace points in the requested period")
    first = next(iter(buckets))
    rasters = [rasterize_day(pts, grid, (d - first).days, d) for d, pts in buckets.items()]
    uid = user_id if user_id is not None else (points[0].user_id if points else "")
    return DailySeries(uid, grid, rasters)


# ------------------------------------------------------------- imputation and scaling


def impute_missing(series: DailySeries, start: dt.date | None = None,
                   end: dt.date | None = None) -> DailySeries:
    """Fill absent calendar days with the mean raster of observed days sharing the weekday.

    The calendar runs from the first to the last observed day unless
    ``start``/``end`` widen it.
    """
    if not series.rasters:
        return series
    observed = {r.date: r for r in series.rasters}
    by_weekday: dict[int, list[np.ndarray]] = {}
    for r in series.rasters:
        by_weekday.setdefault(r.date.weekday(), []).append(r.counts)
    first, last = series.rasters[0].date, series.rasters[-1].date
    if start is not None:
        first = min(first, start)
    if end is not None:
        last = max(last, end)
    means: dict[int, np.ndarray] = {}
    out, imputed = [], set(series.imputed)
    for k in range((last - first).days + 1):
        d = first + dt.timedelta(days=k)
        if d in observed:
            r = observed[d]
            out.append(VisitCountRaster(k, d, r.counts, r.dropped))
            continue
        wd = d.weekday()
        if wd not in by_weekday:
            raise ImputationError(f"cannot impute {d}: no observed {d.strftime('%A')} in series")
        if wd not in means:
            means[wd] = np.mean(np.stack(by_weekday[wd]), axis=0)
        out.append(VisitCountRaster(k, d, means[wd].copy()))
        imputed.add(k)
    return replace(series, rasters=out, imputed=imputed)


def scale_unit(series: DailySeries) -> DailySeries:
    """Divide all counts by the series-wide maximum (kept in ``scale_max``)."""
    peak = float(max((r.counts.max() for r in series.rasters), default=0.0))
    scale = peak if peak > 0 else 1.0
    rasters = [replace(r, counts=r.counts / scale) for r in series.rasters]
    return replace(series, rasters=rasters, scale_max=scale)


def unscale(series: DailySeries) -> DailySeries:
    if series.scale_max is None:
        return series
    rasters = [replace(r, counts=r.counts * series.scale_max) for r in series.rasters]
    return replace(series, rasters=rasters, scale_max=None)


# -------------------------------------------------------------------------- windows


def make_windows(series: DailySeries, ext: Sequence[ExtFeature] | None = None) -> list[SupervisedWindow]:
    """Stride-1 sliding windows: 7 + 7 history days and a 7-day target."""
    n = len(series.rasters)
    if n < WINDOW_DAYS:
        raise InsufficientDataError(f"need at least {WINDOW_DAYS} days, series has {n}")
    idx = [r.day_index for r in series.rasters]
    if idx != list(range(idx[0], idx[0] + n)):
        raise InsufficientDataError("series has gaps; impute before windowing")
    if ext is None:
        ext = external_features(series.dates, {"working": True})
    out = []
    for k in range(n - WINDOW_DAYS + 1):
        days = series.rasters[k:k + WINDOW_DAYS]
        out.append(SupervisedWindow(days[:7], days[7:14], days[14:], list(ext[k + 14:k + 21])))
    return out


def _as_date(value) -> dt.date:
    if isinstance(value, dt.datetime):
        return value.date()
    if isinstance(value, dt.date):
        return value
    try:
        return dt.date.fromisoformat(str(value))
    except ValueError as exc:
        raise ValidationError(f"unparseable date {value!r}") from exc


def external_features(dates, user_meta: dict, holidays: Iterable[dt.date] = ()) -> list[ExtFeature]:
    """Day type and work flag per date. ``user_meta['working']`` is the employment status."""
    working = bool(user_meta.get("working", False))
    hol = set(holidays)
    out = []
    for value in dates:
        d = _as_date(value)
        weekend = d.weekday() >= 5
        off = weekend or d in hol
        out.append(ExtFeature(d, int(weekend), int(working and not off)))
    return out


def day_kind_counts(dates: Iterable[dt.date], holidays: Iterable[dt.date] = ()) -> tuple[int, int]:
    """(weekdays, weekends-or-holidays) over the given dates."""
    hol = set(holidays)
    wd = we = 0
    for d in dates:
        if d.weekday() >= 5 or d in hol:
            we += 1
        else:
            wd += 1
    return wd, we


# ------------------------------------------------------------------------ synthetic


@dataclass(frozen=True)
class SynthSpec:
    rows: int = 8
    cols: int = 8
    home: tuple[int, int] = (1, 1)
    work: tuple[int, int] = (6, 5)
    leisure: tuple[int, int] = (2, 6)
    weekday_home: float = 8.0
    weekday_work: float = 10.0
    weekend_home: float = 12.0
    weekend_leisure: float = 6.0
    noise: float = 0.0  # fraction of each intensity drawn as Poisson variation, in [0, 1]
    stray: float = 0.0  # Poisson rate of stray visits on every cell
    days: int = 120
    start: dt.date = dt.date(2009, 4, 1)
    user_id: str = "synth"
    working: bool = True

    def grid(self) -> GridSpec:
        # 0.01 degree cells anchored on an arbitrary origin
        return GridSpec(39.9, 39.9 + 0.01 * self.rows, 116.3, 116.3 + 0.01 * self.cols, self.rows, self.cols)


def synth_generate(spec: SynthSpec, seed: int) -> DailySeries:
    """Commuter pattern: home+work on weekdays, home+leisure on weekends.

    With ``noise`` = q each active cell receives ``round((1-q)*lam) + Poisson(q*lam)``
    visits (mean about lam, variance q*lam); ``stray`` adds Poisson visits to every cell.
    """
    for name in ("home", "work", "leisure"):
        r, c = getattr(spec, name)
        if not (0 <= r < spec.rows and 0 <= c < spec.cols):
            raise ValidationError(f"{name} cell {(r, c)} outside {spec.rows}x{spec.cols} grid")
    if spec.days < 1:
        raise ValidationError("day count must be positive")
    if not 0.0 <= spec.noise <= 1.0 or spec.stray < 0:
        raise ValidationError("noise must be in [0, 1] and stray >= 0")
    rng = np.random.default_rng(seed)
    grid = spec.grid()
    rasters = []
    for k in range(spec.days):
        d = spec.start + dt.timedelta(days=k)
        counts = np.zeros(grid.shape)
        if d.weekday() < 5:
            visits = ((spec.home, spec.weekday_home), (spec.work, spec.weekday_work))
        else:
            visits = ((spec.home, spec.weekend_home), (spec.leisure, spec.weekend_leisure))
        for cell, lam in visits:
            counts[cell] += round((1.0 - spec.noise) * lam)
            if spec.noise > 0:
                counts[cell] += rng.poisson(spec.noise * lam)
        if spec.stray > 0:
            counts += rng.poisson(spec.stray, size=grid.shape)
        rasters.append(VisitCountRaster(k, d, counts))
    return DailySeries(spec.user_id, grid, rasters)
