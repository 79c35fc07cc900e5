"""Run configuration: one strictly validated JSON document.

Relative paths are resolved against the config file's directory. Unknown
keys, malformed values, and missing input files are reported with the key
or file that caused them; JSON syntax errors carry line and column. The
only environment overrides are DOWNSCALE_OUTPUT_DIR and DOWNSCALE_JOBS.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

from .forest import ForestParams
from .quadgrid import MAX_ZOOM, BBox

KINDS = ("extensive", "intensive")
ROLES = ("target", "auxiliary")
PREDICTION_MODELS = ("fl_rf", "fl_glm_lasso")


class ConfigError(Exception):
    pass


@dataclass(frozen=True)
class VariableSpec:
    name: str
    kind: str
    role: str = "target"


@dataclass(frozen=True)
class RunConfig:
    sources: Path
    output_dir: Path
    variables: tuple[VariableSpec, ...]
    points: Path | None = None
    lines: Path | None = None
    rasters: dict[str, Path] = field(default_factory=dict)
    category_map: Path | None = None  # None uses the packaged mapping
    bbox: BBox | None = None  # None derives it from the source geometries
    zoom: int = 17
    seed: int = 0
    folds: int = 5
    min_training_units: int = 30
    rf_grid: tuple[ForestParams, ...] | None = None
    rf_grid_cap: int | None = 12
    fl_use_adjusted: bool = True
    weighted_intensive: bool = False
    prediction_model: str = "fl_rf"
    truth: Path | None = None
    jobs: int = 1

    def targets(self) -> list[VariableSpec]:
        return [v for v in self.variables if v.role == "target"]

    def auxiliaries(self) -> list[VariableSpec]:
        return [v for v in self.variables if v.role == "auxiliary"]

    def variable(self, name: str) -> VariableSpec:
        for v in self.variables:
            if v.name == name:
                return v
        raise KeyError(name)


_KEYS = {
    "sources", "points", "lines", "rasters", "category_map", "output_dir",
    "bbox", "zoom", "seed", "folds", "min_training_units", "variables",
    "rf_grid", "rf_grid_cap", "fl_use_adjusted", "weighted_intensive",
    "prediction_model", "truth", "jobs",
}

_GRID_KEYS = {"n_trees", "max_depth", "min_samples_leaf", "mtry", "bootstrap"}


def _fail(msg: str) -> None:
    raise ConfigError(msg)


def _as_int(doc: dict, key: str, default: int, lo: int, hi: int) -> int:
    v = doc.get(key, default)
    if not isinstance(v, int) or isinstance(v, bool) or not lo <= v <= hi:
        _fail(f"'{key}' must be an integer in [{lo}, {hi}], got {v!r}")
    return v


def _as_bool(doc: dict, key: str, default: bool) -> bool:
    v = doc.get(key, default)
    if not isinstance(v, bool):
        _fail(f"'{key}' must be true or false, got {v!r}")
    return v


def _input_path(base: Path, key: str, value, required: bool = False) -> Path | None:
    if value is None:
        if required:
            _fail(f"'{key}' is required")
        return None
    if not isinstance(value, str) or not value:
        _fail(f"'{key}' must be a path string, got {value!r}")
    path = (base / value).resolve()
    if not path.is_file():
        _fail(f"'{key}' points to a missing file: {path}")
    return path


def _parse_variables(raw) -> tuple[VariableSpec, ...]:
    if not isinstance(raw, list) or not raw:
        _fail("'variables' must be a non-empty list")
    out = []
    for i, item in enumerate(raw):
        if not isinstance(item, dict):
            _fail(f"variables[{i}] must be an object")
        unknown = set(item) - {"name", "kind", "role"}
        if unknown:
            _fail(f"variables[{i}] has unknown keys: {', '.join(sorted(unknown))}")
        name = item.get("name")
        if not isinstance(name, str) or not name:
            _fail(f"variables[{i}] needs a non-empty 'name'")
        kind = item.get("kind", "extensive")
        if kind not in KINDS:
            _fail(f"variables[{i}] kind must be one of {KINDS}, got {kind!r}")
        role = item.get("role", "target")
        if role not in ROLES:
            _fail(f"variables[{i}] role must be one of {ROLES}, got {role!r}")
        out.append(VariableSpec(name=name, kind=kind, role=role))
    names = [v.name for v in out]
    if len(set(names)) != len(names):
        dupes = sorted({n for n in names if names.count(n) > 1})
        _fail(f"duplicate variable names: {', '.join(dupes)}")
    if not any(v.role == "target" for v in out):
        _fail("at least one variable must have role 'target'")
    return tuple(out)


def _parse_grid(raw) -> tuple[ForestParams, ...] | None:
    if raw is None:
        return None
    if not isinstance(raw, list) or not raw:
        _fail("'rf_grid' must be a non-empty list of objects or null")
    out = []
    for i, item in enumerate(raw):
        if not isinstance(item, dict):
            _fail(f"rf_grid[{i}] must be an object")
        unknown = set(item) - _GRID_KEYS
        if unknown:
            _fail(f"rf_grid[{i}] has unknown keys: {', '.join(sorted(unknown))}")
        try:
            out.append(ForestParams(**item))
        except TypeError as exc:
            _fail(f"rf_grid[{i}] is invalid: {exc}")
    return tuple(out)


def _parse_bbox(raw) -> BBox | None:
    if raw is None:
        return None
    ok = (
        isinstance(raw, list)
        and len(raw) == 4
        and all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in raw)
    )
    if not ok:
        _fail(f"'bbox' must be [west, south, east, north], got {raw!r}")
    west, south, east, north = (float(v) for v in raw)
    if not (west < east and south < north):
        _fail(f"'bbox' is empty: {raw!r}")
    return BBox(west=west, south=south, east=east, north=north)


def parse_config(doc: dict, base: Path) -> RunConfig:
    if not isinstance(doc, dict):
        _fail("config root must be a JSON object")
    unknown = set(doc) - _KEYS
    if unknown:
        _fail(f"unknown config keys: {', '.join(sorted(unknown))}")

    raw_rasters = doc.get("rasters", {})
    if not isinstance(raw_rasters, dict):
        _fail(f"'rasters' must be an object of name -> path, got {raw_rasters!r}")
    rasters = {}
    for name in sorted(raw_rasters):
        if not isinstance(name, str) or not name:
            _fail(f"raster name must be a non-empty string, got {name!r}")
        rasters[name] = _input_path(base, f"rasters.{name}", raw_rasters[name], required=True)

    out_dir = doc.get("output_dir")
    if not isinstance(out_dir, str) or not out_dir:
        _fail(f"'output_dir' must be a path string, got {out_dir!r}")

    model = doc.get("prediction_model", "fl_rf")
    if model not in PREDICTION_MODELS:
        _fail(f"'prediction_model' must be one of {PREDICTION_MODELS}, got {model!r}")

    return RunConfig(
        sources=_input_path(base, "sources", doc.get("sources"), required=True),
        points=_input_path(base, "points", doc.get("points")),
        lines=_input_path(base, "lines", doc.get("lines")),
        rasters=rasters,
        category_map=_input_path(base, "category_map", doc.get("category_map")),
        output_dir=(base / out_dir).resolve(),
        bbox=_parse_bbox(doc.get("bbox")),
        zoom=_as_int(doc, "zoom", 17, 1, MAX_ZOOM),
        seed=_as_int(doc, "seed", 0, 0, 2**31 - 1),
        folds=_as_int(doc, "folds", 5, 2, 100),
        min_training_units=_as_int(doc, "min_training_units", 30, 2, 10**6),
        variables=_parse_variables(doc.get("variables")),
        rf_grid=_parse_grid(doc.get("rf_grid")),
        rf_grid_cap=(
            None
            if doc.get("rf_grid_cap", 12) is None
            else _as_int(doc, "rf_grid_cap", 12, 1, 10**4)
        ),
        fl_use_adjusted=_as_bool(doc, "fl_use_adjusted", True),
        weighted_intensive=_as_bool(doc, "weighted_intensive", False),
        prediction_model=model,
        truth=_input_path(base, "truth", doc.get("truth")),
        jobs=_as_int(doc, "jobs", 1, 1, 1024),
    )


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(
            f"{path}: invalid JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}"
        ) from exc
    try:
        return parse_config(doc, path.parent.resolve())
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def apply_env_overrides(cfg: RunConfig, env=os.environ) -> RunConfig:
    """DOWNSCALE_OUTPUT_DIR and DOWNSCALE_JOBS are the only overrides."""
    out = env.get("DOWNSCALE_OUTPUT_DIR")
    if out:
        cfg = replace(cfg, output_dir=Path(out).resolve())
    jobs = env.get("DOWNSCALE_JOBS")
    if jobs:
        try:
            n = int(jobs)
        except ValueError:
            raise ConfigError(f"DOWNSCALE_JOBS must be an integer, got {jobs!r}")
        if n < 1:
            raise ConfigError(f"DOWNSCALE_JOBS must be >= 1, got {n}")
        cfg = replace(cfg, jobs=n)
    return cfg
