"""Run configuration stored as a flat ``key = value`` file."""
from __future__ import annotations

import configparser
import dataclasses
import datetime as dt
from dataclasses import dataclass, field
from pathlib import Path

from .ingest import CN_HOLIDAYS_2009, GridSpec, SynthSpec
from .model import HyperConfig

_SECTION = "run"


class ConfigError(ValueError):
    pass


def _cell(text: str) -> tuple[int, int]:
    r, c = (int(v) for v in text.split(","))
    return r, c


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


@dataclass
class RunConfig:
    dataset: str = "synth"
    data_dir: str | None = None
    work_dir: str = "work"
    checkpoint: str | None = None
    user_id: str = "synth"
    start: dt.date | None = None
    end: dt.date | None = None
    utc_offset_hours: float = 8.0
    working: bool = True
    holidays: tuple[dt.date, ...] = CN_HOLIDAYS_2009
    lat_min: float = 39.75
    lat_max: float = 40.10
    lon_min: float = 116.15
    lon_max: float = 116.60
    rows: int = 32
    cols: int = 32
    max_level: int | None = None
    train_fraction: float = 0.6
    val_fraction: float = 0.2
    hyper: HyperConfig = field(default_factory=HyperConfig)
    synth: SynthSpec = field(default_factory=SynthSpec)

    def __post_init__(self):
        if self.dataset not in ("geolife", "csv", "synth"):
            raise ConfigError(f"unknown dataset kind {self.dataset!r}")
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigError("train_fraction must be in (0, 1)")
        if not 0.0 <= self.val_fraction < 1.0 or self.train_fraction + self.val_fraction >= 1.0:
            raise ConfigError("val_fraction must be in [0, 1) and leave room for test windows")

    @property
    def seed(self) -> int:
        return self.hyper.seed

    def grid(self) -> GridSpec:
        if self.dataset == "synth":
            return self.synth.grid()
        return GridSpec(self.lat_min, self.lat_max, self.lon_min, self.lon_max, self.rows, self.cols)

    @property
    def work_path(self) -> Path:
        return Path(self.work_dir)

    @property
    def checkpoint_path(self) -> Path:
        return Path(self.checkpoint) if self.checkpoint else self.work_path / "model.ckpt"

    def with_seed(self, seed: int) -> "RunConfig":
        return dataclasses.replace(self, hyper=dataclasses.replace(self.hyper, seed=seed),
                                   synth=self.synth)

    # ---------------------------------------------------------------- text format

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            if f.name in ("hyper", "synth"):
                continue
            lines.append(f"{f.name} = {_dump(getattr(self, f.name))}")
        for f in dataclasses.fields(self.hyper):
            lines.append(f"{f.name} = {_dump(getattr(self.hyper, f.name))}")
        for f in dataclasses.fields(self.synth):
            lines.append(f"synth_{f.name} = {_dump(getattr(self.synth, f.name))}")
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        try:
            cp.read_string(f"[{_SECTION}]\n" + text)
        except configparser.Error as exc:
            raise ConfigError(str(exc)) from exc
        raw = dict(cp[_SECTION])
        top, hyper, synth = {}, {}, {}
        top_types = {f.name: f for f in dataclasses.fields(cls)}
        hyper_types = {f.name: f for f in dataclasses.fields(HyperConfig)}
        synth_types = {f.name: f for f in dataclasses.fields(SynthSpec)}
        for key, value in raw.items():
            try:
                if key.startswith("synth_") and key[6:] in synth_types:
                    synth[key[6:]] = _parse(key[6:], value, SynthSpec)
                elif key in hyper_types:
                    hyper[key] = _parse(key, value, HyperConfig)
                elif key in top_types and key not in ("hyper", "synth"):
                    top[key] = _parse(key, value, cls)
                else:
                    raise ConfigError(f"unknown configuration key {key!r}")
            except (ValueError, TypeError) as exc:
                raise ConfigError(f"{key}: {exc}") from exc
        try:
            return cls(**top, hyper=HyperConfig(**hyper), synth=SynthSpec(**synth))
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_text(Path(path).read_text(encoding="utf-8"))


def _dump(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, dt.date):
        return v.isoformat()
    if isinstance(v, tuple):
        return ",".join(_dump(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


_DATE_KEYS = {"start", "end"}
_CELL_KEYS = {"home", "work", "leisure"}


def _parse(key: str, value: str, owner):
    value = value.strip()
    if key == "holidays":
        return tuple(dt.date.fromisoformat(v.strip()) for v in value.split(",") if v.strip())
    if key in _DATE_KEYS:
        return dt.date.fromisoformat(value) if value else None
    if key in _CELL_KEYS:
        return _cell(value)
    default = {f.name: f for f in dataclasses.fields(owner)}[key].default
    if value == "":
        return None
    if isinstance(default, bool):
        return _bool(value)
    if isinstance(default, int) or key == "max_level":
        return int(value)
    if isinstance(default, float):
        return float(value)
    return value
