"""Pipeline configuration: a TOML file plus flag overrides (flags win)."""

from __future__ import annotations

import dataclasses
import datetime as dt
import hashlib
import json
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from ._parallel import default_workers
from .errors import ValidationError

RANDOMIZED_STAGES = ("nullmodel", "regress", "classify", "synth", "pipeline")


def _path(v) -> Path:
    return Path(str(v))


def _date(v) -> dt.date:
    if isinstance(v, dt.datetime):
        return v.date()
    if isinstance(v, dt.date):
        return v
    return dt.date.fromisoformat(str(v))


def _clock(v) -> int:
    """``"HH:MM"`` (or a TOML local time) to minutes after midnight."""
    if isinstance(v, dt.time):
        return v.hour * 60 + v.minute
    hh, mm = str(v).split(":")
    h, m = int(hh), int(mm)
    if not (0 <= h < 24 and 0 <= m < 60):
        raise ValueError(f"not a clock time: {v!r}")
    return h * 60 + m


def _int(v) -> int:
    if isinstance(v, bool) or (isinstance(v, float) and not v.is_integer()):
        raise ValueError(f"not an integer: {v!r}")
    return int(v)


def _optional_int(v) -> int | None:
    return None if v in (None, "", "auto") else _int(v)


# dotted key -> (field name, parser)
KEYS: dict[str, tuple[str, Callable[[Any], Any]]] = {
    "inputs.cdr": ("cdr", _path),
    "inputs.towers": ("towers", _path),
    "inputs.regions": ("regions", _path),
    "inputs.tower_regions": ("tower_regions", _path),
    "inputs.geometry": ("geometry", _path),
    "observation.start": ("start", _date),
    "observation.end": ("end", _date),
    "filter.min_rate": ("min_rate", float),
    "measures.night_start": ("night_start", _clock),
    "measures.night_end": ("night_end", _clock),
    "territory.population_floor": ("population_floor", float),
    "territory.min_users": ("min_users", _int),
    "territory.cutoff_km": ("cutoff_km", float),
    "nullmodel.repetitions": ("nm_repetitions", _int),
    "regression.cv_repetitions": ("cv_repetitions", _int),
    "regression.train_fraction": ("cv_train_fraction", float),
    "classify.trees": ("trees", _int),
    "classify.features_per_split": ("features_per_split", _optional_int),
    "classify.min_leaf": ("min_leaf", _int),
    "classify.train_fraction": ("class_train_fraction", float),
    "run.seed": ("seed", _int),
    "run.workers": ("workers", _int),
    "run.output": ("output", _path),
}
PATH_FIELDS = {"cdr", "towers", "regions", "tower_regions", "geometry", "output"}


@dataclass(frozen=True)
class PipelineConfig:
    cdr: Path | None = None
    towers: Path | None = None
    regions: Path | None = None
    tower_regions: Path | None = None
    geometry: Path | None = None
    start: dt.date | None = None
    end: dt.date | None = None
    min_rate: float = 0.5
    night_start: int = 22 * 60
    night_end: int = 7 * 60
    population_floor: float = 1000.0
    min_users: int = 1
    cutoff_km: float = 10.0
    nm_repetitions: int = 100
    cv_repetitions: int = 1000
    cv_train_fraction: float = 0.6
    trees: int = 200
    features_per_split: int | None = None
    min_leaf: int = 1
    class_train_fraction: float = 0.6
    seed: int | None = None
    workers: int = field(default_factory=default_workers)
    output: Path = Path("nowcast-out")

    @property
    def night(self) -> tuple[int, int]:
        return self.night_start, self.night_end

    def settings(self, names) -> dict:
        """JSON-ready view of the named fields."""
        out = {}
        for name in names:
            v = getattr(self, name)
            out[name] = v.isoformat() if isinstance(v, dt.date) else str(v) if isinstance(v, Path) else v
        return out

    def validate(self) -> "PipelineConfig":
        problems = []
        if not self.min_rate > 0:
            problems.append("filter.min_rate must be positive")
        for name in ("nm_repetitions", "cv_repetitions", "trees", "min_users", "min_leaf"):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be at least 1")
        for name in ("cv_train_fraction", "class_train_fraction"):
            if not 0 < getattr(self, name) < 1:
                problems.append(f"{name} must lie strictly between 0 and 1")
        if self.features_per_split is not None and self.features_per_split < 1:
            problems.append("classify.features_per_split must be at least 1")
        if self.cutoff_km < 0:
            problems.append("territory.cutoff_km must be non-negative")
        if self.workers < 1:
            problems.append("run.workers must be at least 1")
        if (self.start is None) != (self.end is None):
            problems.append("observation.start and observation.end must be given together")
        elif self.start is not None and self.end <= self.start:
            problems.append("observation.end must be after observation.start")
        if self.seed is not None and self.seed < 0:
            problems.append("seed must be non-negative")
        if problems:
            raise ValidationError("invalid configuration: " + "; ".join(problems))
        return self

    def require_inputs(self, *names: str) -> None:
        """Every named input must be configured and exist on disk."""
        for name in names:
            p = getattr(self, name)
            key = next(k for k, (f, _) in KEYS.items() if f == name)
            if p is None:
                raise ValidationError(f"{key} is not configured")
            if not Path(p).is_file():
                raise ValidationError(f"{key}: file not found: {p}")

    def require_seed(self, stage: str) -> int:
        if self.seed is None:
            raise ValidationError(f"stage {stage!r} is randomized and needs an explicit --seed")
        return self.seed


def read_toml(path: str | os.PathLike) -> dict:
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except FileNotFoundError:
        raise ValidationError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ValidationError(f"{path}: {exc}") from None


def flatten(doc: dict, prefix: str = "") -> dict[str, Any]:
    out = {}
    for k, v in doc.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(flatten(v, key + "."))
        else:
            out[key] = v
    return out


def build_config(file_values: dict[str, Any] | None = None, overrides: dict[str, Any] | None = None,
                 base_dir: Path | None = None, ignore: tuple[str, ...] = ()) -> PipelineConfig:
    """Merge dotted-key values; ``overrides`` win over ``file_values``.

    Relative paths from the file resolve against ``base_dir``; override
    paths resolve against the working directory. Keys under a section in
    ``ignore`` belong to another tool and are skipped.
    """
    kwargs = {}
    for source, values in (("file", file_values or {}), ("flag", overrides or {})):
        for key, raw in values.items():
            if raw is None or key.split(".")[0] in ignore:
                continue
            if key not in KEYS:
                raise ValidationError(f"unknown configuration key {key!r}")
            name, parse = KEYS[key]
            try:
                value = parse(raw)
            except (TypeError, ValueError) as exc:
                raise ValidationError(f"{key}: {exc}") from None
            if name in PATH_FIELDS and source == "file" and base_dir is not None and not value.is_absolute():
                value = base_dir / value
            kwargs[name] = value
    return PipelineConfig(**kwargs).validate()


def load_config(path: str | os.PathLike | None, overrides: dict[str, Any] | None = None) -> PipelineConfig:
    file_values = {}
    base = None
    if path is not None:
        file_values = flatten(read_toml(path))
        base = Path(path).parent
    return build_config(file_values, overrides, base, ignore=("synth",))


def config_hash(settings: dict) -> str:
    text = json.dumps(settings, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def replace(cfg: PipelineConfig, **changes) -> PipelineConfig:
    return dataclasses.replace(cfg, **changes).validate()
