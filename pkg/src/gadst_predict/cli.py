"""Command-line entry point: ``gadst {ingest,tree,train,evaluate,predict,synth}``."""
from __future__ import annotations

import argparse
import dataclasses
import datetime as dt
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import ingest as I
from . import pipeline as P
from .config import ConfigError, RunConfig
from .tensor import CheckpointError

DATA_ROOT_ENV = "GADST_DATA_ROOT"

log = logging.getLogger("gadst_predict")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="gadst", description="Quadtree ConvLSTM visit-count forecasting")
    ap.add_argument("--config", type=Path, help="key = value run configuration")
    ap.add_argument("--seed", type=int, help="override the configured seed")
    ap.add_argument("--workdir", type=Path, help="override the configured work directory")
    ap.add_argument("--data-dir", type=Path, help=f"raw data root (default: ${DATA_ROOT_ENV})")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    sub.add_parser("ingest", help="parse, bucket, impute and scale the raw traces")
    sub.add_parser("tree", help="build the universal quadtree and aligned frames")
    tr = sub.add_parser("train", help="fit the model and write checkpoint + history")
    tr.add_argument("--epochs", type=int, help="override the configured epoch count")
    ev = sub.add_parser("evaluate", help="write the per-horizon metric report")
    ev.add_argument("--heatmaps", action="store_true", help="also write SVG heatmaps")
    pr = sub.add_parser("predict", help="forecast the 7 days starting at DATE")
    pr.add_argument("date", type=dt.date.fromisoformat)
    pr.add_argument("--out", type=Path, help="output directory (default: <workdir>/predictions)")
    sy = sub.add_parser("synth", help="write a synthetic trace CSV from the configured synth spec")
    sy.add_argument("out", type=Path)
    return ap


def load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if args.workdir is not None:
        cfg = dataclasses.replace(cfg, work_dir=str(args.workdir))
    data_dir = args.data_dir or os.environ.get(DATA_ROOT_ENV)
    if args.data_dir is not None or (cfg.data_dir is None and data_dir):
        cfg = dataclasses.replace(cfg, data_dir=str(data_dir))
    if getattr(args, "epochs", None) is not None:
        if args.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        cfg = dataclasses.replace(cfg, hyper=dataclasses.replace(cfg.hyper, epochs=args.epochs))
    return cfg


def synth_points(series: I.DailySeries, utc_offset: dt.timedelta) -> list[I.TracePoint]:
    """One fix per visit at the cell centre, spread over the local day."""
    g = series.grid
    dlat = (g.lat_max - g.lat_min) / g.rows
    dlon = (g.lon_max - g.lon_min) / g.cols
    pts = []
    for r in series.rasters:
        base = dt.datetime.combine(r.date, dt.time(8, 0), tzinfo=dt.timezone.utc) - utc_offset
        k = 0
        for (row, col), n in np.ndenumerate(r.counts):
            for _ in range(int(n)):
                lat = g.lat_max - (row + 0.5) * dlat
                lon = g.lon_min + (col + 0.5) * dlon
                pts.append(I.TracePoint(series.user_id, base + dt.timedelta(seconds=30 * k), lat, lon))
                k += 1
    return pts


def run(args, cfg: RunConfig) -> int:
    cmd = args.command
    if cmd == "ingest":
        _, summary = P.ingest(cfg)
        print(summary.text(), end="", file=sys.stderr)
    elif cmd == "tree":
        table = P.build_tree(cfg)
        log.info("geo-index table: %d nodes, %d cells", len(table), table.length)
    elif cmd == "train":
        def progress(rec):
            log.info("epoch %d train_loss=%.6g val_loss=%.6g", rec.epoch, rec.train_loss, rec.val_loss)
        try:
            P.train(cfg, progress=progress)
        except P.M.TrainingDivergedError as exc:
            print(f"error: training diverged in epoch {exc.epoch}; last finite epoch {exc.last_finite_epoch}",
                  file=sys.stderr)
            return 1
    elif cmd == "evaluate":
        P.evaluate(cfg, heatmaps=args.heatmaps)
    elif cmd == "predict":
        P.predict(cfg, args.date, args.out)
    elif cmd == "synth":
        series = I.synth_generate(cfg.synth, cfg.seed)
        args.out.parent.mkdir(parents=True, exist_ok=True)
        I.write_csv_trace(synth_points(series, dt.timedelta(hours=cfg.utc_offset_hours)), args.out)
    return 0


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args)
        return run(args, cfg)
    except (P.MissingInputError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, CheckpointError, P.PipelineError, I.TraceParseError, I.ValidationError,
            I.ImputationError, I.InsufficientDataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
