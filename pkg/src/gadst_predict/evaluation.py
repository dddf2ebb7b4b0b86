"""Overlap recall/precision, the uniform naive predictor, normalized metrics and reports."""
from __future__ import annotations

import csv
import datetime as dt
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .ingest import HORIZON, DailySeries, SupervisedWindow

log = logging.getLogger(__name__)

SPLITS = ("overall", "weekdays", "weekends")
METRICS = ("norm_precision", "norm_recall")


@dataclass(frozen=True)
class MetricRecord:
    recall: float
    precision: float
    base_recall: float
    base_precision: float
    norm_recall: float
    norm_precision: float


def _check(x, x_hat):
    x = np.asarray(x, dtype=np.float64)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    if x.shape != x_hat.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {x_hat.shape}")
    return x, x_hat


def overlap_metrics(x, x_hat) -> tuple[float, float]:
    """(recall, precision) from the cellwise overlap ``sum(min(X, X_hat))``; NaN when undefined."""
    x, x_hat = _check(x, x_hat)
    overlap = np.minimum(x, x_hat).sum()
    tx, tp = x.sum(), x_hat.sum()
    recall = overlap / tx if tx > 0 else math.nan
    precision = overlap / tp if tp > 0 else math.nan
    return float(recall), float(precision)


def naive_predict(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return np.full(x.shape, x.sum() / x.size)


def normalized_metrics(x, x_hat) -> MetricRecord:
    x, x_hat = _check(x, x_hat)
    r, p = overlap_metrics(x, x_hat)
    br, bp = overlap_metrics(x, naive_predict(x))
    return MetricRecord(r, p, br, bp, r - br, p - bp)


def coarsen(x, factor: int = 2) -> np.ndarray:
    """Sum-pool non-overlapping ``factor`` x ``factor`` blocks."""
    x = np.asarray(x)
    m, n = x.shape
    return x.reshape(m // factor, factor, n // factor, factor).sum(axis=(1, 3))


def is_weekend(d: dt.date, holidays: Iterable[dt.date] = ()) -> bool:
    return d.weekday() >= 5 or d in set(holidays)


@dataclass
class HorizonReport:
    """stats[split][metric] -> (means per horizon, stds per horizon, counts per horizon)."""
    stats: dict
    horizon: int = HORIZON

    def mean(self, split: str, metric: str) -> np.ndarray:
        return self.stats[split][metric][0]

    def std(self, split: str, metric: str) -> np.ndarray:
        return self.stats[split][metric][1]

    def count(self, split: str, metric: str) -> np.ndarray:
        return self.stats[split][metric][2]

    def rows(self, label: str | None = None) -> list[list[str]]:
        out = []
        for split in SPLITS:
            if split not in self.stats:
                continue
            for metric in METRICS:
                means, stds, _ = self.stats[split][metric]
                head = [label] if label is not None else []
                out.append(head + [split, f"{metric}_mean"] + [_fmt(v) for v in means])
                out.append(head + [split, f"{metric}_std"] + [_fmt(v) for v in stds])
        return out

    def to_csv(self, path, label: str | None = None) -> None:
        write_reports({label or "model": self}, path, with_label=label is not None)


def _fmt(v: float) -> str:
    return "nan" if not np.isfinite(v) else f"{v:.6f}"


def write_reports(reports: dict[str, HorizonReport], path, with_label: bool = True) -> None:
    horizon = max(r.horizon for r in reports.values())
    head = (["predictor"] if with_label else []) + ["split", "metric"] + [f"f{k}" for k in range(1, horizon + 1)]
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(head)
        for label, rep in reports.items():
            w.writerows(rep.rows(label if with_label else None))


def aggregate(truth: np.ndarray, preds: np.ndarray, target_dates: Sequence[Sequence[dt.date]],
              holidays: Iterable[dt.date] = ()) -> HorizonReport:
    """Mean and population std of normalized metrics per horizon and day-type split.

    ``truth`` and ``preds`` are (windows, H, M, N) in count space. Undefined
    metrics (zero denominators) are left out of the averages.
    """
    truth = np.asarray(truth, dtype=np.float64)
    preds = np.asarray(preds, dtype=np.float64)
    if truth.shape != preds.shape:
        raise ValueError(f"shape mismatch: {truth.shape} vs {preds.shape}")
    n, horizon = truth.shape[:2]
    hol = set(holidays)
    samples = {s: {m: [[] for _ in range(horizon)] for m in METRICS} for s in SPLITS}
    for w in range(n):
        for f in range(horizon):
            rec = normalized_metrics(truth[w, f], preds[w, f])
            kind = "weekends" if is_weekend(target_dates[w][f], hol) else "weekdays"
            for m in METRICS:
                v = getattr(rec, m)
                if np.isfinite(v):
                    samples["overall"][m][f].append(v)
                    samples[kind][m][f].append(v)
    stats = {}
    for split in SPLITS:
        if all(len(samples[split][m][f]) == 0 for m in METRICS for f in range(horizon)):
            log.warning("split %s has no evaluated days; omitted", split)
            continue
        stats[split] = {}
        for m in METRICS:
            vals = samples[split][m]
            means = np.array([np.mean(v) if v else np.nan for v in vals])
            stds = np.array([np.std(v) if v else np.nan for v in vals])
            counts = np.array([len(v) for v in vals])
            stats[split][m] = (means, stds, counts)
    return HorizonReport(stats, horizon)


def aggregate_report(windows: Sequence[SupervisedWindow], predictor, holidays: Iterable[dt.date] = (),
                     scale_max: float = 1.0) -> HorizonReport:
    """Evaluate ``predictor(window) -> (H, M, N)`` count-space rasters on every window.

    Window rasters are taken as scaled by ``scale_max``; truth is compared in count space.
    """
    truth = np.stack([np.stack([r.counts for r in w.target]) for w in windows]) * scale_max
    preds = np.stack([np.asarray(predictor(w)) for w in windows])
    dates = [[r.date for r in w.target] for w in windows]
    return aggregate(truth, preds[:, :truth.shape[1]], dates, holidays)


# ----------------------------------------------------------------------- baselines


def weekday_means(series: DailySeries, until: int | None = None) -> dict[int, np.ndarray]:
    """Mean raster per weekday over the first ``until`` days of the series."""
    rasters = series.rasters if until is None else series.rasters[:until]
    groups: dict[int, list[np.ndarray]] = {}
    for r in rasters:
        groups.setdefault(r.date.weekday(), []).append(r.counts)
    return {wd: np.mean(np.stack(v), axis=0) for wd, v in groups.items()}


def baseline_predict(kind: str, series: DailySeries | None, window: SupervisedWindow,
                     train_days: int | None = None, horizon: int = HORIZON) -> np.ndarray:
    """Reference forecasts in the window's value space.

    persistence repeats the last observed day; historical_average uses the
    per-weekday mean raster of the training part (first ``train_days`` days).
    """
    if kind == "persistence":
        last = window.week_b[-1].counts
        return np.stack([last] * horizon)
    if kind == "historical_average":
        if series is None:
            raise ValueError("historical_average needs the training series")
        means = weekday_means(series, train_days)
        out = []
        for r in window.target[:horizon]:
            wd = r.date.weekday()
            if wd not in means:
                raise ValueError(f"no training data for weekday {wd}")
            out.append(means[wd])
        return np.stack(out)
    if kind == "naive":
        return np.stack([naive_predict(r.counts) for r in window.target[:horizon]])
    raise ValueError(f"unknown baseline {kind!r}")


# --------------------------------------------------------------------- heatmaps


def heatmap_svg(true: np.ndarray, pred: np.ndarray, title: str = "", cell: int = 16) -> str:
    """Side-by-side grayscale heatmaps of a true and predicted raster."""
    true = np.asarray(true, dtype=float)
    pred = np.asarray(pred, dtype=float)
    m, n = true.shape
    top = max(true.max(), pred.max(), 1e-12)
    gap = cell
    width = 2 * n * cell + gap
    height = m * cell + 20
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
             f'<text x="0" y="12" font-size="11">{title}</text>']
    for panel, arr in enumerate((true, pred)):
        x0 = panel * (n * cell + gap)
        for r in range(m):
            for c in range(n):
                shade = 255 - int(round(255 * arr[r, c] / top))
                parts.append(f'<rect x="{x0 + c * cell}" y="{20 + r * cell}" width="{cell}" height="{cell}" '
                             f'fill="rgb({shade},{shade},{shade})"/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
