"""End-to-end steps shared by the CLI and the tests: ingest, tree, train, evaluate, predict."""
from __future__ import annotations

import datetime as dt
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import evaluation as E
from . import ingest as I
from . import model as M
from . import quadtree as Q
from .config import RunConfig
from .tensor import load_arrays, save_arrays

log = logging.getLogger(__name__)

SERIES_FILE = "series.bin"
SUMMARY_FILE = "summary.txt"
TABLE_FILE = "geo_index_table.txt"
FRAMES_FILE = "frames.bin"
HISTORY_FILE = "history.csv"
METRICS_FILE = "metrics.csv"


class PipelineError(RuntimeError):
    pass


class MissingInputError(PipelineError):
    pass


# ------------------------------------------------------------------------ series io


def save_series(series: I.DailySeries, path) -> None:
    g = series.grid
    imputed = np.array([r.day_index in series.imputed for r in series.rasters], dtype=np.uint8)
    meta = {"user_id": series.user_id, "dates": [d.isoformat() for d in series.dates],
            "day_index": [r.day_index for r in series.rasters], "scale_max": series.scale_max,
            "grid": [g.lat_min, g.lat_max, g.lon_min, g.lon_max, g.rows, g.cols]}
    save_arrays({"counts": series.stack(), "imputed": imputed}, path, meta)


def load_series(path) -> I.DailySeries:
    if not Path(path).exists():
        raise MissingInputError(f"{path} not found; run 'ingest' first")
    arrays, meta = load_arrays(path)
    la, lb, oa, ob, rows, cols = meta["grid"]
    grid = I.GridSpec(la, lb, oa, ob, int(rows), int(cols))
    rasters = [I.VisitCountRaster(k, dt.date.fromisoformat(d), arrays["counts"][i])
               for i, (k, d) in enumerate(zip(meta["day_index"], meta["dates"]))]
    imputed = {rasters[i].day_index for i in np.flatnonzero(arrays["imputed"])}
    return I.DailySeries(meta["user_id"], grid, rasters, meta["scale_max"], imputed)


# -------------------------------------------------------------------------- ingest


@dataclass
class IngestSummary:
    user_id: str
    start: dt.date
    end: dt.date
    days: int
    weekdays: int
    weekends: int
    missing_weekdays: int
    missing_weekends: int
    dropped_points: int

    def text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in self.__dict__.items())


def find_geolife_files(root: Path, user_id: str) -> list[Path]:
    cands = [root / "Data" / user_id / "Trajectory", root / user_id / "Trajectory", root / "Trajectory"]
    for c in cands:
        if c.is_dir():
            return sorted(c.glob("*.plt"))
    hits = sorted(root.rglob(f"{user_id}/Trajectory/*.plt"))
    return hits


def raw_series(cfg: RunConfig) -> I.DailySeries:
    """Observed-day series (before imputation/scaling) for the configured dataset."""
    if cfg.dataset == "synth":
        return I.synth_generate(cfg.synth, cfg.seed)
    if not cfg.data_dir:
        raise MissingInputError("no data directory configured (use --data-dir or GADST_DATA_ROOT)")
    root = Path(cfg.data_dir)
    if not root.exists():
        raise MissingInputError(f"data directory {root} does not exist")
    offset = dt.timedelta(hours=cfg.utc_offset_hours)
    if cfg.dataset == "geolife":
        files = find_geolife_files(root, cfg.user_id)
        if not files:
            raise MissingInputError(f"no .plt files for user {cfg.user_id} under {root}")
        points = [p for f in files for p in I.parse_geolife_plt(f, cfg.user_id)]
        points.sort(key=lambda p: p.timestamp)
    else:
        files = [root] if root.is_file() else sorted(root.glob("*.csv"))
        if not files:
            raise MissingInputError(f"no CSV traces under {root}")
        points = [p for f in files for p in I.parse_csv_trace(f) if p.user_id == cfg.user_id]
    return I.build_series(points, cfg.grid(), cfg.user_id, offset, cfg.start, cfg.end)


def summarize(observed: I.DailySeries, full: I.DailySeries, holidays) -> IngestSummary:
    wd, we = I.day_kind_counts(full.dates, holidays)
    missing = [r.date for r in full.rasters if r.day_index in full.imputed]
    mwd, mwe = I.day_kind_counts(missing, holidays)
    return IngestSummary(full.user_id, full.dates[0], full.dates[-1], len(full), wd, we, mwd, mwe,
                         sum(r.dropped for r in observed.rasters))


def ingest(cfg: RunConfig) -> tuple[I.DailySeries, IngestSummary]:
    observed = raw_series(cfg)
    full = I.impute_missing(observed, cfg.start, cfg.end)
    scaled = I.scale_unit(full)
    summary = summarize(observed, full, cfg.holidays)
    out = cfg.work_path
    out.mkdir(parents=True, exist_ok=True)
    save_series(scaled, out / SERIES_FILE)
    (out / SUMMARY_FILE).write_text(summary.text(), encoding="utf-8")
    return scaled, summary


# ---------------------------------------------------------------------------- tree


def split_point(n_windows: int, fraction: float) -> int:
    """Number of chronologically first windows used for training."""
    return max(1, min(n_windows - 1, int(round(n_windows * fraction)))) if n_windows > 1 else 1


def split_counts(n_windows: int, train_fraction: float, val_fraction: float) -> tuple[int, int, int]:
    """Chronological (train, validation, test) window counts; train and test get at least one."""
    n_tr = split_point(n_windows, train_fraction)
    n_va = min(int(round(n_windows * val_fraction)), max(n_windows - n_tr - 1, 0))
    return n_tr, n_va, n_windows - n_tr - n_va


def training_days(series: I.DailySeries, fraction: float) -> int:
    n_win = len(series) - I.WINDOW_DAYS + 1
    if n_win < 1:
        raise I.InsufficientDataError(f"need at least {I.WINDOW_DAYS} days, series has {len(series)}")
    return split_point(n_win, fraction) + I.WINDOW_DAYS - 1


def build_tree(cfg: RunConfig, series: I.DailySeries | None = None, spot_checks: int = 5) -> Q.GeoIndexTable:
    series = series or load_series(cfg.work_path / SERIES_FILE)
    n_train = training_days(series, cfg.train_fraction)
    stack = series.stack()
    universal = Q.build_universal(list(stack[:n_train]), cfg.max_level)
    quadlist = Q.build_universal_quadlist(universal)
    table = Q.build_geo_index_table(quadlist, universal.node_shapes, universal.shape)
    frames = np.stack([Q.flatten(Q.align(Q.decompose(r, universal.tree.max_level), quadlist, universal.node_shapes),
                                 table) for r in stack])
    mass_in = stack.reshape(len(stack), -1).sum(axis=1)
    if not np.array_equal(frames.sum(axis=1), mass_in) and not np.allclose(frames.sum(axis=1), mass_in,
                                                                          rtol=1e-12, atol=0):
        raise PipelineError("alignment did not conserve visit mass")
    rng = np.random.default_rng([cfg.seed, 7])
    for k in rng.choice(len(stack), size=min(spot_checks, len(stack)), replace=False):
        if not np.array_equal(Q.unflatten_to_raster(frames[k], table), stack[k]):
            raise PipelineError(f"reconstruction spot-check failed on day {k}")
    out = cfg.work_path
    out.mkdir(parents=True, exist_ok=True)
    table.save(out / TABLE_FILE)
    save_arrays({"frames": frames}, out / FRAMES_FILE, {"days": len(stack), "length": table.length})
    return table


def load_table(cfg: RunConfig) -> Q.GeoIndexTable:
    path = cfg.work_path / TABLE_FILE
    if not path.exists():
        raise MissingInputError(f"{path} not found; run 'tree' first")
    return Q.GeoIndexTable.load(path)


# --------------------------------------------------------------------------- train


def series_windows(cfg: RunConfig, series: I.DailySeries):
    """Chronological (train, validation, test) window lists."""
    ext = I.external_features(series.dates, {"working": cfg.working}, cfg.holidays)
    windows = I.make_windows(series, ext)
    n_tr, n_va, _ = split_counts(len(windows), cfg.train_fraction, cfg.val_fraction)
    return windows[:n_tr], windows[n_tr:n_tr + n_va], windows[n_tr + n_va:]


def train(cfg: RunConfig, series: I.DailySeries | None = None, table: Q.GeoIndexTable | None = None,
          progress=None) -> tuple[M.GADSTModel, M.History]:
    series = series or load_series(cfg.work_path / SERIES_FILE)
    table = table or load_table(cfg)
    hp = cfg.hyper
    tr, va, _ = series_windows(cfg, series)
    dtype = hp.np_dtype
    train_arr = M.windows_to_arrays(tr, table, hp.horizon, dtype)
    val_arr = M.windows_to_arrays(va, table, hp.horizon, dtype) if va else None
    model = M.GADSTModel(hp, table)
    history = M.fit(model, train_arr, val_arr, progress=progress)
    out = cfg.work_path
    out.mkdir(parents=True, exist_ok=True)
    M.save_checkpoint(model, cfg.checkpoint_path, {"scale_max": series.scale_max})
    history.to_csv(out / HISTORY_FILE)
    return model, history


# ------------------------------------------------------------------------ evaluate


def evaluate(cfg: RunConfig, series: I.DailySeries | None = None, model: M.GADSTModel | None = None,
             heatmaps: bool = False) -> dict[str, E.HorizonReport]:
    series = series or load_series(cfg.work_path / SERIES_FILE)
    if model is None:
        if not cfg.checkpoint_path.exists():
            raise MissingInputError(f"checkpoint {cfg.checkpoint_path} not found; run 'train' first")
        model, _ = M.load_checkpoint(cfg.checkpoint_path)
    scale = series.scale_max or 1.0
    _, _, test = series_windows(cfg, series)
    if not test:
        raise PipelineError("no held-out windows to evaluate")
    hp = model.hp
    arr = M.windows_to_arrays(test, model.table, hp.horizon, hp.np_dtype)
    preds = M.predict_arrays(model, arr, scale)
    truth = np.stack([np.stack([r.counts for r in w.target[:hp.horizon]]) for w in test]) * scale
    dates = [[r.date for r in w.target[:hp.horizon]] for w in test]
    n_train_days = training_days(series, cfg.train_fraction)
    reports = {"model": E.aggregate(truth, preds, dates, cfg.holidays)}
    for kind in ("persistence", "historical_average", "naive"):
        bp = np.stack([E.baseline_predict(kind, series, w, n_train_days, hp.horizon) for w in test])
        if kind != "naive":
            bp = bp * scale
        else:
            bp = np.stack([[E.naive_predict(t) for t in tw] for tw in truth])
        reports[kind] = E.aggregate(truth, bp, dates, cfg.holidays)
    out = cfg.work_path
    out.mkdir(parents=True, exist_ok=True)
    E.write_reports(reports, out / METRICS_FILE)
    if heatmaps:
        hdir = out / "heatmaps"
        hdir.mkdir(exist_ok=True)
        for f in range(hp.horizon):
            d = dates[0][f]
            (hdir / f"{d.isoformat()}_f{f + 1}.svg").write_text(
                E.heatmap_svg(truth[0, f], preds[0, f], f"{d} f={f + 1}"), encoding="utf-8")
    return reports


# ------------------------------------------------------------------------- predict


def forecast_window(cfg: RunConfig, series: I.DailySeries, first_day: dt.date, horizon: int) -> I.SupervisedWindow:
    by_date = {r.date: r for r in series.rasters}
    hist = [first_day - dt.timedelta(days=14 - k) for k in range(14)]
    missing = [d for d in hist if d not in by_date]
    if missing:
        raise I.InsufficientDataError(f"need the 14 days before {first_day}; missing {missing[0]}"
                                      + (f" and {len(missing) - 1} more" if len(missing) > 1 else ""))
    days = [by_date[d] for d in hist]
    tdates = [first_day + dt.timedelta(days=k) for k in range(horizon)]
    zero = np.zeros(series.grid.shape)
    target = [by_date.get(d) or I.VisitCountRaster(-1, d, zero) for d in tdates]
    ext = I.external_features(tdates, {"working": cfg.working}, cfg.holidays)
    return I.SupervisedWindow(days[:7], days[7:], target, ext)


def predict(cfg: RunConfig, first_day: dt.date, out_dir: Path | None = None,
            series: I.DailySeries | None = None, model: M.GADSTModel | None = None) -> np.ndarray:
    series = series or load_series(cfg.work_path / SERIES_FILE)
    if model is None:
        if not cfg.checkpoint_path.exists():
            raise MissingInputError(f"checkpoint {cfg.checkpoint_path} not found; run 'train' first")
        model, _ = M.load_checkpoint(cfg.checkpoint_path)
    window = forecast_window(cfg, series, first_day, model.hp.horizon)
    rasters = M.predict(model, window, series.scale_max or 1.0)
    out_dir = out_dir or cfg.work_path / "predictions"
    out_dir.mkdir(parents=True, exist_ok=True)
    for f, r in enumerate(rasters):
        d = first_day + dt.timedelta(days=f)
        write_raster_csv(r, out_dir / f"{d.isoformat()}.csv")
        (out_dir / f"{d.isoformat()}.svg").write_text(E.heatmap_svg(r, r, f"{d} forecast"), encoding="utf-8")
    return rasters


def write_raster_csv(r: np.ndarray, path) -> None:
    Path(path).write_text("".join(",".join(repr(float(v)) for v in row) + "\n" for row in r), encoding="utf-8")


def read_raster_csv(path) -> np.ndarray:
    rows = Path(path).read_text(encoding="utf-8").strip().splitlines()
    return np.array([[float(v) for v in row.split(",")] for row in rows])
