"""End-to-end downscaling: supports, covariates, models, anchoring, scores.

The flow has five stages. prepare() builds the target grid and the hybrid
support (source units cut along cell edges) and aggregates covariates onto
both the source and hybrid supports. train() selects a family and features
per variable with the GLM-LASSO, applies forward learning (other variables
whose covariate-only models score higher are admitted as extra covariates),
and trains a random forest on the selected set. downscale() predicts on the
hybrid support in dependency order, anchors predictions to the source values
(sum for extensive variables, mean for intensive ones), and aggregates to
the target cells. evaluate() writes the cross-scale consistency diagnostics.
run() chains all four and records a run report.

All randomness flows from the config seed; reruns produce byte-identical
CSV artifacts.
"""

from __future__ import annotations

import csv
import json
import time
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .config import RunConfig
from .cv import fold_assignments, fold_checksum
from .forest import (
    ForestModel,
    ForestParams,
    fit_forest,
    hyper_search,
    model_from_dict,
    model_to_dict,
    params_to_dict,
    predict_forest,
)
from .geom import Fragment, build_hybrid_support
from .glmlasso import (
    CvResult,
    LassoFit,
    fit_from_dict,
    fit_lasso,
    fit_to_dict,
    predict as glm_predict,
    select_family,
)
from .ingest import (
    aggregate_lines,
    aggregate_points,
    area_interpolate,
    assemble_design,
    fragment_support,
    load_category_map,
    load_lines,
    load_points,
    load_raster,
    load_sources,
    unit_support,
)
from .quadgrid import BBox, cell_polygon

BUNDLE_FORMAT = "fit-bundle/1"
# A unit is complete when its fragments reproduce its area to this relative
# tolerance. Clipping drops sub-1e-14 slivers and accumulates float noise a
# few orders below 1e-6, while a genuinely missing fragment is a few orders
# above it, so this threshold separates the two cleanly.
COMPLETENESS_TOL = 1e-6
ANCHOR_TOL = 1e-9
ZERO_SUM_TOL = 1e-12

PREPARED_DIR = "prepared"
MODELS_DIR = "models"
OUTPUT_DIR = "output"
EVAL_DIR = "evaluation"

UNITS_CSV = "units.csv"
RESPONSES_CSV = "responses.csv"
HYBRID_CSV = "hybrid_support.csv"
DESIGN_SOURCE_CSV = "design_source.csv"
DESIGN_HYBRID_CSV = "design_hybrid.csv"
EVAL_REPORT_CSV = "eval_report.csv"
PLAN_JSON = "plan.json"
OUTPUT_CSV = "downscale_output.csv"
HYBRID_PRED_CSV = "hybrid_predictions.csv"
CELLS_GEOJSON = "cells.geojson"
SUMMARY_JSON = "summary.json"
RECOVERY_CSV = "recovery.csv"
RUN_REPORT_JSON = "run_report.json"

EVAL_MODELS = ("glm_lasso", "fl_glm_lasso", "fl_rf")


class PipelineError(Exception):
    pass


# ---------------------------------------------------------------------------
# deterministic artifact io


def _fmt(v) -> str:
    return repr(float(v))


def _write_csv(path: Path, header: list[str], rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def _read_csv(path: Path) -> tuple[list[str], list[list[str]]]:
    if not path.is_file():
        raise PipelineError(f"missing artifact {path}; run the earlier stage first")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        return header, list(reader)


def _write_json(path: Path, doc) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _read_json(path: Path):
    if not path.is_file():
        raise PipelineError(f"missing artifact {path}; run the earlier stage first")
    with open(path) as fh:
        return json.load(fh)


# ---------------------------------------------------------------------------
# scoring


def pseudo_r2(y, yhat) -> float:
    """1 - sum((y - yhat)^2) / sum((y - ybar)^2); may be negative."""
    y = np.asarray(y, dtype=float)
    yhat = np.asarray(yhat, dtype=float)
    if y.shape != yhat.shape or y.ndim != 1:
        raise ValueError("pseudo_r2 needs two equally long vectors")
    if len(y) < 2:
        raise ValueError("pseudo_r2 needs at least 2 observations")
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    if ss_tot <= 0.0:
        raise ValueError("pseudo_r2 is undefined for a constant response")
    return float(1.0 - float(np.sum((y - yhat) ** 2)) / ss_tot)


# ---------------------------------------------------------------------------
# prepare


@dataclass
class Prepared:
    units: list[str]  # unit ids in source file order
    unit_areas: dict[str, float]
    complete: dict[str, bool]
    responses: dict[str, dict[str, float]]  # variable -> unit -> value
    frag_units: list[str]  # per hybrid fragment, sorted (unit, quadkey)
    frag_keys: list[str]
    frag_areas: np.ndarray
    X_source: np.ndarray  # rows follow `units`
    X_hybrid: np.ndarray  # rows follow fragments
    names: list[str]


def _aggregate_covariates(support, cfg: RunConfig) -> dict[str, np.ndarray]:
    columns: dict[str, np.ndarray] = {}
    if cfg.points is not None:
        lon, lat, cats = load_points(cfg.points)
        category_map = load_category_map(cfg.category_map)
        columns.update(aggregate_points(lon, lat, cats, category_map, support))
    if cfg.lines is not None:
        columns.update(aggregate_lines(load_lines(cfg.lines), support))
    for name in sorted(cfg.rasters):
        raster = load_raster(cfg.rasters[name], name)
        columns.update(area_interpolate(raster, support))
    return columns


def prepare(cfg: RunConfig) -> Prepared:
    """Build supports, aggregate covariates, and write the prepared tables."""
    units = load_sources(cfg.sources)
    if not units:
        raise PipelineError(f"{cfg.sources} contains no source units")
    geoms = {u.id: u.geometry for u in units}
    fragments = build_hybrid_support(geoms, cfg.zoom)
    if cfg.bbox is not None:
        fragments = [f for f in fragments if _cell_in_bbox(f, cfg.bbox)]
    if not fragments:
        raise PipelineError("no hybrid fragments; check zoom and bbox")

    support_units = unit_support(units)
    unit_areas = {u.id: float(a) for u, a in zip(units, support_units.areas)}
    frag_area_sum: dict[str, float] = {u.id: 0.0 for u in units}
    for f in fragments:
        frag_area_sum[f.unit_id] += f.area
    complete = {
        uid: abs(frag_area_sum[uid] - area) <= COMPLETENESS_TOL * area and area > 0.0
        for uid, area in unit_areas.items()
    }

    support_hybrid = fragment_support(fragments, geoms, cfg.zoom)
    cols_source = _aggregate_covariates(support_units, cfg)
    cols_hybrid = _aggregate_covariates(support_hybrid, cfg)
    X_source, names = assemble_design(cols_source)
    X_hybrid, _ = assemble_design(cols_hybrid, names)

    responses: dict[str, dict[str, float]] = {v.name: {} for v in cfg.variables}
    for u in units:
        for v in cfg.variables:
            value = u.responses.get(v.name)
            if value is not None:
                responses[v.name][u.id] = value

    prepared = Prepared(
        units=[u.id for u in units],
        unit_areas=unit_areas,
        complete=complete,
        responses=responses,
        frag_units=[f.unit_id for f in fragments],
        frag_keys=[f.quadkey for f in fragments],
        frag_areas=np.array([f.area for f in fragments]),
        X_source=X_source,
        X_hybrid=X_hybrid,
        names=names,
    )
    _write_prepared(cfg.output_dir / PREPARED_DIR, prepared)
    return prepared


def _cell_in_bbox(f: Fragment, bbox: BBox) -> bool:
    from .quadgrid import cell_bounds

    b = cell_bounds(f.quadkey)
    return b.west < bbox.east and b.east > bbox.west and b.south < bbox.north and b.north > bbox.south


def _write_prepared(out: Path, p: Prepared) -> None:
    _write_csv(
        out / UNITS_CSV,
        ["unit_id", "area", "complete"],
        [[u, _fmt(p.unit_areas[u]), int(p.complete[u])] for u in p.units],
    )
    _write_csv(
        out / RESPONSES_CSV,
        ["unit_id", "variable", "value"],
        [
            [u, v, _fmt(p.responses[v][u])]
            for v in sorted(p.responses)
            for u in sorted(p.responses[v])
        ],
    )
    _write_csv(
        out / HYBRID_CSV,
        ["source_id", "quadkey", "area"],
        [
            [u, q, _fmt(a)]
            for u, q, a in zip(p.frag_units, p.frag_keys, p.frag_areas)
        ],
    )
    _write_csv(
        out / DESIGN_SOURCE_CSV,
        ["unit_id"] + p.names,
        [[u] + [_fmt(v) for v in row] for u, row in zip(p.units, p.X_source)],
    )
    _write_csv(
        out / DESIGN_HYBRID_CSV,
        ["source_id", "quadkey"] + p.names,
        [
            [u, q] + [_fmt(v) for v in row]
            for u, q, row in zip(p.frag_units, p.frag_keys, p.X_hybrid)
        ],
    )


def read_prepared(cfg: RunConfig) -> Prepared:
    out = cfg.output_dir / PREPARED_DIR
    _, unit_rows = _read_csv(out / UNITS_CSV)
    units = [r[0] for r in unit_rows]
    unit_areas = {r[0]: float(r[1]) for r in unit_rows}
    complete = {r[0]: r[2] == "1" for r in unit_rows}
    _, resp_rows = _read_csv(out / RESPONSES_CSV)
    responses: dict[str, dict[str, float]] = {v.name: {} for v in cfg.variables}
    for uid, var, value in resp_rows:
        responses.setdefault(var, {})[uid] = float(value)
    header, src_rows = _read_csv(out / DESIGN_SOURCE_CSV)
    names = header[1:]
    X_source = np.array([[float(v) for v in r[1:]] for r in src_rows])
    if [r[0] for r in src_rows] != units:
        raise PipelineError("design_source rows do not match units.csv")
    header, hyb_rows = _read_csv(out / DESIGN_HYBRID_CSV)
    if header[2:] != names:
        raise PipelineError("hybrid and source designs disagree on covariates")
    _, frag_rows = _read_csv(out / HYBRID_CSV)
    if [(r[0], r[1]) for r in frag_rows] != [(r[0], r[1]) for r in hyb_rows]:
        raise PipelineError("design_hybrid rows do not match hybrid_support.csv")
    return Prepared(
        units=units,
        unit_areas=unit_areas,
        complete=complete,
        responses=responses,
        frag_units=[r[0] for r in frag_rows],
        frag_keys=[r[1] for r in frag_rows],
        frag_areas=np.array([float(r[2]) for r in frag_rows]),
        X_source=X_source,
        X_hybrid=np.array([[float(v) for v in r[2:]] for r in hyb_rows]),
        names=names,
    )


# ---------------------------------------------------------------------------
# training


@dataclass
class Stage1Fit:
    family: str
    lasso: LassoFit
    score: float
    oof: np.ndarray
    rows: list[str]  # unit ids used


@dataclass
class VariableFit:
    name: str
    kind: str
    role: str
    family: str
    stage1_lasso: LassoFit
    stage1_score: float
    extras: list[str]
    fl_lasso: LassoFit
    forest: ForestModel | None
    hyper: dict | None
    scores: dict[str, float]
    folds_seed: int
    fold_checksum: str
    n_train: int


def _chosen_oof(fit: LassoFit, cv: CvResult) -> np.ndarray:
    idx = int(np.nonzero(cv.lambdas == fit.chosen_lambda)[0][0])
    return cv.oof_predictions[:, idx]


def stage1_fit(
    X: np.ndarray, y: np.ndarray, names: list[str], rows: list[str], k: int, seed: int
) -> Stage1Fit:
    """Family selection plus LASSO on the multi-scale covariates only."""
    family = select_family(X, y, k=k, seed=seed)
    fit, cv = fit_lasso(X, y, names, family=family, k=k, seed=seed)
    oof = _chosen_oof(fit, cv)
    return Stage1Fit(family=family, lasso=fit, score=pseudo_r2(y, oof), oof=oof, rows=rows)


def _forest_oof(
    X: np.ndarray,
    y: np.ndarray,
    names: list[str],
    params: ForestParams,
    folds: np.ndarray,
    seed: int,
) -> np.ndarray:
    oof = np.empty(len(y))
    for i in range(int(folds.max()) + 1):
        test = folds == i
        model = fit_forest(X[~test], y[~test], names, params, seed=seed)
        oof[test] = predict_forest(model, X[test], names)
    return oof


def forward_learning_fit(
    name: str,
    spec_kind: str,
    role: str,
    X_fl: np.ndarray,
    fl_names: list[str],
    y: np.ndarray,
    extras: list[str],
    family: str,
    stage1_lasso: LassoFit,
    stage1_score: float,
    glm_score: float,
    k: int,
    seed: int,
    rf_grid: list[ForestParams] | None,
    rf_grid_cap: int | None,
) -> VariableFit:
    """LASSO on multi-scale + admitted extras, then a forest on the selection.

    With no admitted extras this reduces to the stage-1 model. All three
    reported scores use the same seeded folds.
    """
    fl_lasso, cv = fit_lasso(X_fl, y, fl_names, family=family, k=k, seed=seed)
    fl_score = pseudo_r2(y, _chosen_oof(fl_lasso, cv))
    folds = fold_assignments(len(y), k, seed)

    selected = fl_lasso.selected
    forest = None
    hyper_doc = None
    if selected:
        cols = [fl_names.index(n) for n in selected]
        X_sel = X_fl[:, cols]
        report = hyper_search(
            X_sel, y, selected, grid=list(rf_grid) if rf_grid else None,
            k=k, seed=seed, max_configs=rf_grid_cap,
        )
        rf_score = pseudo_r2(y, _forest_oof(X_sel, y, selected, report.chosen, folds, seed))
        forest = fit_forest(X_sel, y, selected, report.chosen, seed=seed)
        hyper_doc = {
            "chosen": params_to_dict(report.chosen),
            "entries": [
                {"params": params_to_dict(p), "cv_mse": m, "cv_se": s}
                for p, m, s in report.entries
            ],
        }
    else:
        # nothing selected: the model is the LASSO intercept, a constant
        rf_score = fl_score
    return VariableFit(
        name=name,
        kind=spec_kind,
        role=role,
        family=family,
        stage1_lasso=stage1_lasso,
        stage1_score=stage1_score,
        extras=extras,
        fl_lasso=fl_lasso,
        forest=forest,
        hyper=hyper_doc,
        scores={"glm_lasso": glm_score, "fl_glm_lasso": fl_score, "fl_rf": rf_score},
        folds_seed=seed,
        fold_checksum=fold_checksum(folds),
        n_train=len(y),
    )


@dataclass
class VariablePlan:
    name: str
    kind: str
    role: str
    stage1_score: float
    extras: list[str]
    rank: int


def plan_prediction_order(bundles: dict[str, VariableFit]) -> list[VariablePlan]:
    """Topological order of the extras-dependency graph.

    Ties are broken by descending stage-1 score, then name, so the order is
    deterministic. A cycle is impossible under strict-inequality admission
    but is still reported as a hard error.
    """
    pending = dict(bundles)
    done: set[str] = set()
    plans: list[VariablePlan] = []
    while pending:
        ready = [
            b for b in pending.values() if all(e in done for e in b.extras)
        ]
        if not ready:
            cycle = ", ".join(sorted(pending))
            raise PipelineError(f"cyclic covariate dependencies among: {cycle}")
        ready.sort(key=lambda b: (-b.stage1_score, b.name))
        chosen = ready[0]
        plans.append(
            VariablePlan(
                name=chosen.name,
                kind=chosen.kind,
                role=chosen.role,
                stage1_score=chosen.stage1_score,
                extras=list(chosen.extras),
                rank=len(plans),
            )
        )
        done.add(chosen.name)
        del pending[chosen.name]
    return plans


@dataclass
class TrainResult:
    bundles: dict[str, VariableFit]
    plans: list[VariablePlan]
    skipped: dict[str, str]


def _training_rows(
    prepared: Prepared, variables: list[str]
) -> tuple[list[str], np.ndarray]:
    """Complete units having every listed variable's response, plus row index."""
    index = {u: i for i, u in enumerate(prepared.units)}
    rows = [
        u
        for u in prepared.units
        if prepared.complete[u]
        and all(u in prepared.responses.get(v, {}) for v in variables)
    ]
    return rows, np.array([index[u] for u in rows], dtype=np.int64)


def train(cfg: RunConfig, prepared: Prepared | None = None) -> TrainResult:
    """Fit every variable: stage 1, forward-learning admission, FL refit."""
    if prepared is None:
        prepared = read_prepared(cfg)
    k, seed = cfg.folds, cfg.seed
    skipped: dict[str, str] = {}
    stage1: dict[str, Stage1Fit] = {}
    for v in cfg.variables:
        rows, idx = _training_rows(prepared, [v.name])
        if len(rows) < cfg.min_training_units:
            skipped[v.name] = (
                f"{len(rows)} complete training units, need {cfg.min_training_units}"
            )
            continue
        y = np.array([prepared.responses[v.name][u] for u in rows])
        try:
            stage1[v.name] = stage1_fit(
                prepared.X_source[idx], y, prepared.names, rows, k, seed
            )
        except ValueError as exc:
            skipped[v.name] = str(exc)

    bundles: dict[str, VariableFit] = {}
    admitted_aux: set[str] = set()
    target_extras: dict[str, list[str]] = {}
    for v in cfg.targets():
        if v.name not in stage1:
            continue
        own = stage1[v.name].score
        extras = sorted(
            name
            for name, s1 in stage1.items()
            if name != v.name and s1.score > own
        )
        target_extras[v.name] = extras
        admitted_aux.update(e for e in extras if cfg.variable(e).role == "auxiliary")

    scheduled = [v for v in cfg.targets() if v.name in stage1] + [
        v for v in cfg.auxiliaries() if v.name in admitted_aux
    ]
    for v in scheduled:
        s1 = stage1[v.name]
        extras = target_extras.get(v.name, [])
        rows, idx = _training_rows(prepared, [v.name] + extras)
        y = np.array([prepared.responses[v.name][u] for u in rows])
        extra_cols = [
            np.array([prepared.responses[e][u] for u in rows]) for e in extras
        ]
        X_fl = prepared.X_source[idx]
        if extra_cols:
            X_fl = np.column_stack([X_fl] + extra_cols)
        if rows == s1.rows:
            glm_score = s1.score
        else:
            # extras shrank the training set; rescore the covariate-only
            # model on the same rows and folds as the FL models
            refit, recv = fit_lasso(
                prepared.X_source[idx], y, prepared.names, family=s1.family, k=k, seed=seed
            )
            glm_score = pseudo_r2(y, _chosen_oof(refit, recv))
        bundles[v.name] = forward_learning_fit(
            v.name,
            v.kind,
            v.role,
            X_fl,
            prepared.names + extras,
            y,
            extras,
            s1.family,
            s1.lasso,
            s1.score,
            glm_score,
            k,
            seed,
            list(cfg.rf_grid) if cfg.rf_grid else None,
            cfg.rf_grid_cap,
        )

    plans = plan_prediction_order(bundles)
    _write_models(cfg, bundles, plans, skipped)
    return TrainResult(bundles=bundles, plans=plans, skipped=skipped)


def bundle_to_dict(b: VariableFit) -> dict:
    return {
        "format": BUNDLE_FORMAT,
        "variable": b.name,
        "kind": b.kind,
        "role": b.role,
        "family": b.family,
        "stage1": {"score": b.stage1_score, "lasso": fit_to_dict(b.stage1_lasso)},
        "extras": b.extras,
        "fl_lasso": fit_to_dict(b.fl_lasso),
        "forest": None if b.forest is None else model_to_dict(b.forest),
        "hyper": b.hyper,
        "scores": b.scores,
        "folds_seed": b.folds_seed,
        "fold_checksum": b.fold_checksum,
        "n_train": b.n_train,
    }


def bundle_from_dict(doc: dict) -> VariableFit:
    if doc.get("format") != BUNDLE_FORMAT:
        raise PipelineError(f"unsupported bundle format {doc.get('format')!r}")
    return VariableFit(
        name=doc["variable"],
        kind=doc["kind"],
        role=doc["role"],
        family=doc["family"],
        stage1_lasso=fit_from_dict(doc["stage1"]["lasso"]),
        stage1_score=float(doc["stage1"]["score"]),
        extras=list(doc["extras"]),
        fl_lasso=fit_from_dict(doc["fl_lasso"]),
        forest=None if doc["forest"] is None else model_from_dict(doc["forest"]),
        hyper=doc["hyper"],
        scores={k: float(v) for k, v in doc["scores"].items()},
        folds_seed=int(doc["folds_seed"]),
        fold_checksum=doc["fold_checksum"],
        n_train=int(doc["n_train"]),
    )


def _write_models(
    cfg: RunConfig,
    bundles: dict[str, VariableFit],
    plans: list[VariablePlan],
    skipped: dict[str, str],
) -> None:
    out = cfg.output_dir / MODELS_DIR
    out.mkdir(parents=True, exist_ok=True)
    for name in sorted(bundles):
        _write_json(out / f"fit_{name}.json", bundle_to_dict(bundles[name]))
    rows = []
    target_names = {v.name for v in cfg.targets()}
    for name in sorted(bundles):
        if name not in target_names:
            continue
        b = bundles[name]
        for model in EVAL_MODELS:
            rows.append([name, model, _fmt(b.scores[model]), b.folds_seed])
    _write_csv(out / EVAL_REPORT_CSV, ["variable", "model", "pseudo_r2", "folds_seed"], rows)
    _write_json(
        out / PLAN_JSON,
        {
            "order": [p.name for p in plans],
            "plans": [
                {
                    "name": p.name,
                    "kind": p.kind,
                    "role": p.role,
                    "stage1_score": p.stage1_score,
                    "extras": p.extras,
                    "rank": p.rank,
                }
                for p in plans
            ],
            "skipped": skipped,
            "fold_checksums": {name: bundles[name].fold_checksum for name in sorted(bundles)},
        },
    )


def read_models(cfg: RunConfig) -> TrainResult:
    out = cfg.output_dir / MODELS_DIR
    plan_doc = _read_json(out / PLAN_JSON)
    bundles = {}
    for entry in plan_doc["plans"]:
        bundles[entry["name"]] = bundle_from_dict(_read_json(out / f"fit_{entry['name']}.json"))
    plans = [
        VariablePlan(
            name=e["name"],
            kind=e["kind"],
            role=e["role"],
            stage1_score=float(e["stage1_score"]),
            extras=list(e["extras"]),
            rank=int(e["rank"]),
        )
        for e in plan_doc["plans"]
    ]
    return TrainResult(bundles=bundles, plans=plans, skipped=dict(plan_doc["skipped"]))


# ---------------------------------------------------------------------------
# prediction, anchoring, aggregation


def adjust(
    values: np.ndarray,
    frag_units: list[str],
    frag_areas: np.ndarray,
    responses: dict[str, float],
    kind: str,
    adjustable: set[str],
) -> tuple[np.ndarray, np.ndarray]:
    """Anchor hybrid predictions to source values unit by unit.

    Extensive: scale so the unit's fragments sum to the source value.
    Intensive: scale so their arithmetic mean matches it. Units that are not
    adjustable (missing response or incomplete) pass through unchanged with a
    false flag. A unit whose predictions sum (or average) to zero falls back
    to area-uniform redistribution (extensive) or the constant source value
    (intensive), with a warning.
    """
    values = np.asarray(values, dtype=float)
    adjusted = values.copy()
    flags = np.zeros(len(values), dtype=bool)
    groups: dict[str, list[int]] = {}
    for i, u in enumerate(frag_units):
        groups.setdefault(u, []).append(i)
    for u in sorted(groups):
        if u not in adjustable or u not in responses:
            continue
        idx = np.array(groups[u], dtype=np.int64)
        y_a = responses[u]
        pred = values[idx]
        if kind == "extensive":
            total = float(pred.sum())
            if abs(total) <= ZERO_SUM_TOL:
                warnings.warn(
                    f"unit {u!r}: predictions sum to zero; "
                    "redistributing the source value uniformly by area",
                    stacklevel=2,
                )
                areas = frag_areas[idx]
                adjusted[idx] = y_a * areas / float(areas.sum())
            else:
                adjusted[idx] = pred * (y_a / total)
        else:
            mean = float(pred.mean())
            if abs(mean) <= ZERO_SUM_TOL:
                warnings.warn(
                    f"unit {u!r}: predictions average to zero; "
                    "using the constant source value",
                    stacklevel=2,
                )
                adjusted[idx] = y_a
            else:
                adjusted[idx] = pred * (y_a / mean)
        flags[idx] = True
    return adjusted, flags


def verify_adjustment(
    adjusted: np.ndarray,
    frag_units: list[str],
    responses: dict[str, float],
    kind: str,
    adjustable: set[str],
) -> None:
    """Assert the anchoring identity for every adjustable unit."""
    groups: dict[str, list[int]] = {}
    for i, u in enumerate(frag_units):
        groups.setdefault(u, []).append(i)
    for u in sorted(adjustable & set(responses)):
        idx = groups.get(u)
        if not idx:
            continue
        y_a = responses[u]
        got = float(adjusted[idx].sum()) if kind == "extensive" else float(adjusted[idx].mean())
        if abs(got - y_a) > ANCHOR_TOL * abs(y_a) + 1e-12:
            raise PipelineError(
                f"anchoring violated for unit {u!r}: expected {y_a!r}, got {got!r}"
            )


def to_target(
    frag_keys: list[str],
    values: np.ndarray,
    kind: str,
    weights: np.ndarray | None = None,
) -> dict[str, float]:
    """Aggregate hybrid fragments to cells: sums (extensive), means (intensive)."""
    out: dict[str, float] = {}
    if kind == "extensive":
        for q, v in zip(frag_keys, values):
            out[q] = out.get(q, 0.0) + float(v)
        return out
    acc: dict[str, list[float]] = {}
    wacc: dict[str, list[float]] = {}
    for i, (q, v) in enumerate(zip(frag_keys, values)):
        acc.setdefault(q, []).append(float(v))
        if weights is not None:
            wacc.setdefault(q, []).append(float(weights[i]))
    for q, vals in acc.items():
        if weights is None:
            out[q] = float(np.mean(vals))
        else:
            w = np.array(wacc[q])
            out[q] = float(np.average(vals, weights=w))
    return out


@dataclass
class DownscaleResult:
    variables: list[str]
    unadjusted: dict[str, np.ndarray]  # per variable, per fragment
    adjusted: dict[str, np.ndarray]
    flags: dict[str, np.ndarray]
    target: dict[str, dict[str, tuple[float, float, bool]]]  # var -> quadkey -> (value, unadj, flag)


def _predict_variable(
    bundle: VariableFit,
    X_base: np.ndarray,
    base_names: list[str],
    extra_values: dict[str, np.ndarray],
    prediction_model: str,
) -> np.ndarray:
    names = list(base_names)
    X = X_base
    if bundle.extras:
        cols = []
        for e in bundle.extras:
            if e not in extra_values:
                raise PipelineError(
                    f"variable {bundle.name!r} needs upstream prediction of {e!r}"
                )
            cols.append(extra_values[e])
        X = np.column_stack([X_base] + cols)
        names = names + bundle.extras
    if prediction_model == "fl_rf" and bundle.forest is not None:
        idx = [names.index(n) for n in bundle.forest.names]
        pred = predict_forest(bundle.forest, X[:, idx], bundle.forest.names)
    else:
        idx = [names.index(n) for n in bundle.fl_lasso.names]
        pred = glm_predict(bundle.fl_lasso, X[:, idx], bundle.fl_lasso.names)
    if not np.all(np.isfinite(pred)):
        raise PipelineError(f"non-finite predictions for variable {bundle.name!r}")
    return pred


def downscale(
    cfg: RunConfig,
    prepared: Prepared | None = None,
    trained: TrainResult | None = None,
    geojson: bool = False,
) -> DownscaleResult:
    """Predict on the hybrid support in rank order, anchor, aggregate, write."""
    if prepared is None:
        prepared = read_prepared(cfg)
    if trained is None:
        trained = read_models(cfg)
    adjustable = {u for u in prepared.units if prepared.complete[u]}
    hybrid_values: dict[str, np.ndarray] = {}
    result = DownscaleResult(
        variables=[p.name for p in trained.plans],
        unadjusted={},
        adjusted={},
        flags={},
        target={},
    )
    for plan in trained.plans:
        bundle = trained.bundles[plan.name]
        pred = _predict_variable(
            bundle, prepared.X_hybrid, prepared.names, hybrid_values, cfg.prediction_model
        )
        responses = prepared.responses.get(plan.name, {})
        adj, flags = adjust(
            pred, prepared.frag_units, prepared.frag_areas, responses, plan.kind, adjustable
        )
        verify_adjustment(adj, prepared.frag_units, responses, plan.kind, adjustable & set(responses))
        hybrid_values[plan.name] = adj if cfg.fl_use_adjusted else pred
        result.unadjusted[plan.name] = pred
        result.adjusted[plan.name] = adj
        result.flags[plan.name] = flags
        weights = prepared.frag_areas if cfg.weighted_intensive else None
        tgt_adj = to_target(prepared.frag_keys, adj, plan.kind, weights)
        tgt_un = to_target(prepared.frag_keys, pred, plan.kind, weights)
        tgt_flag: dict[str, bool] = {}
        for q, f in zip(prepared.frag_keys, flags):
            tgt_flag[q] = tgt_flag.get(q, True) and bool(f)
        result.target[plan.name] = {
            q: (tgt_adj[q], tgt_un[q], tgt_flag[q]) for q in tgt_adj
        }
    _write_downscale(cfg, prepared, result, geojson)
    return result


def _write_downscale(
    cfg: RunConfig, prepared: Prepared, result: DownscaleResult, geojson: bool
) -> None:
    out = cfg.output_dir / OUTPUT_DIR
    rows = []
    for q in sorted({k for t in result.target.values() for k in t}):
        for var in sorted(result.target):
            if q in result.target[var]:
                value, unadj, flag = result.target[var][q]
                rows.append([q, var, _fmt(value), _fmt(unadj), int(flag)])
    _write_csv(
        out / OUTPUT_CSV,
        ["quadkey", "variable", "value", "unadjusted_value", "adjusted"],
        rows,
    )
    hrows = []
    for i, (u, q) in enumerate(zip(prepared.frag_units, prepared.frag_keys)):
        for var in sorted(result.unadjusted):
            hrows.append(
                [
                    u,
                    q,
                    var,
                    _fmt(result.unadjusted[var][i]),
                    _fmt(result.adjusted[var][i]),
                    int(result.flags[var][i]),
                ]
            )
    _write_csv(
        out / HYBRID_PRED_CSV,
        ["source_id", "quadkey", "variable", "unadjusted", "adjusted_value", "adjusted"],
        hrows,
    )
    if geojson:
        features = []
        for q in sorted({k for t in result.target.values() for k in t}):
            props = {"quadkey": q}
            for var in sorted(result.target):
                if q in result.target[var]:
                    props[var] = result.target[var][q][0]
            features.append(
                {
                    "type": "Feature",
                    "geometry": {"type": "Polygon", "coordinates": [
                        [[lon, lat] for lon, lat in cell_polygon(q)]
                    ]},
                    "properties": props,
                }
            )
        _write_json(out / CELLS_GEOJSON, {"type": "FeatureCollection", "features": features})


# ---------------------------------------------------------------------------
# evaluation


def scale_consistency(
    actual: dict[str, float],
    frag_units: list[str],
    unadjusted: np.ndarray,
) -> tuple[float, list[tuple[str, float, float, float]]]:
    """Compare source values against unadjusted predictions summed per unit.

    High agreement means the model generalizes across spatial scales; a low
    score flags scale dependence. Returns the pseudo-R2 and per-unit rows
    (unit, actual, summed prediction, residual).
    """
    sums: dict[str, float] = {}
    for u, v in zip(frag_units, unadjusted):
        if u in actual:
            sums[u] = sums.get(u, 0.0) + float(v)
    units = sorted(actual)
    rows = [(u, actual[u], sums.get(u, 0.0), actual[u] - sums.get(u, 0.0)) for u in units]
    score = pseudo_r2(
        np.array([r[1] for r in rows]), np.array([r[2] for r in rows])
    )
    return score, rows


def evaluate(
    cfg: RunConfig,
    prepared: Prepared | None = None,
    trained: TrainResult | None = None,
    result: DownscaleResult | None = None,
) -> dict:
    """Write scale-consistency tables and, when truth is configured, recovery."""
    if prepared is None:
        prepared = read_prepared(cfg)
    if trained is None:
        trained = read_models(cfg)
    if result is None:
        result = _read_downscale(cfg, prepared, trained)
    out = cfg.output_dir / EVAL_DIR
    summary: dict = {"scale_consistency": {}, "notes": {}, "scores": {}}
    for name in sorted(trained.bundles):
        summary["scores"][name] = trained.bundles[name].scores
    for plan in trained.plans:
        if plan.role != "target":
            continue
        if plan.kind != "extensive":
            summary["notes"][plan.name] = (
                "intensive variable: scale consistency is defined for extensive variables only"
            )
            continue
        actual = {
            u: v
            for u, v in prepared.responses.get(plan.name, {}).items()
            if prepared.complete[u]
        }
        score, rows = scale_consistency(
            actual, prepared.frag_units, result.unadjusted[plan.name]
        )
        summary["scale_consistency"][plan.name] = score
        _write_csv(
            out / f"consistency_{plan.name}.csv",
            ["unit_id", "actual", "summed_prediction", "residual"],
            [[u, _fmt(a), _fmt(s), _fmt(r)] for u, a, s, r in rows],
        )
    if cfg.truth is not None:
        from .synth import read_truth, score_recovery

        truth = read_truth(cfg.truth)
        target_values = {
            var: {q: t[0] for q, t in result.target[var].items()}
            for var in result.target
        }
        recovery = score_recovery(truth, target_values)
        summary["recovery"] = recovery
        _write_csv(
            out / RECOVERY_CSV,
            ["variable", "pseudo_r2"],
            [[v, _fmt(s)] for v, s in sorted(recovery.items())],
        )
    _write_json(out / SUMMARY_JSON, summary)
    return summary


def _read_downscale(
    cfg: RunConfig, prepared: Prepared, trained: TrainResult
) -> DownscaleResult:
    path = cfg.output_dir / OUTPUT_DIR / HYBRID_PRED_CSV
    _, rows = _read_csv(path)
    frag_index = {
        (u, q): i for i, (u, q) in enumerate(zip(prepared.frag_units, prepared.frag_keys))
    }
    n = len(prepared.frag_units)
    variables = [p.name for p in trained.plans]
    result = DownscaleResult(
        variables=variables,
        unadjusted={v: np.zeros(n) for v in variables},
        adjusted={v: np.zeros(n) for v in variables},
        flags={v: np.zeros(n, dtype=bool) for v in variables},
        target={},
    )
    for u, q, var, unadj, adj, flag in rows:
        i = frag_index.get((u, q))
        if i is None:
            raise PipelineError(f"hybrid prediction row ({u}, {q}) not in prepared support")
        if var not in result.unadjusted:
            raise PipelineError(f"hybrid predictions mention unknown variable {var!r}")
        result.unadjusted[var][i] = float(unadj)
        result.adjusted[var][i] = float(adj)
        result.flags[var][i] = flag == "1"
    _, orows = _read_csv(cfg.output_dir / OUTPUT_DIR / OUTPUT_CSV)
    for q, var, value, unadj, flag in orows:
        result.target.setdefault(var, {})[q] = (float(value), float(unadj), flag == "1")
    return result


# ---------------------------------------------------------------------------
# full run


def run(cfg: RunConfig, geojson: bool = False) -> dict:
    """prepare -> train -> downscale -> evaluate, with a run report."""
    report: dict = {
        "version": __version__,
        "numpy": np.__version__,
        "seed": cfg.seed,
        "folds": cfg.folds,
        "zoom": cfg.zoom,
        "prediction_model": cfg.prediction_model,
        "stages": {},
        "failure": None,
    }
    state: dict = {}

    def stage(name, fn):
        t0 = time.perf_counter()
        try:
            state[name] = fn()
        except Exception as exc:
            report["failure"] = {"stage": name, "error": str(exc)}
            report["stages"][name] = {"seconds": round(time.perf_counter() - t0, 3)}
            _write_json(cfg.output_dir / RUN_REPORT_JSON, report)
            raise
        report["stages"][name] = {"seconds": round(time.perf_counter() - t0, 3)}

    stage("prepare", lambda: prepare(cfg))
    prepared = state["prepare"]
    report["stages"]["prepare"].update(
        units=len(prepared.units),
        fragments=len(prepared.frag_units),
        cells=len(set(prepared.frag_keys)),
        covariates=len(prepared.names),
    )
    stage("train", lambda: train(cfg, prepared))
    trained = state["train"]
    report["stages"]["train"].update(
        fitted=sorted(trained.bundles),
        skipped=trained.skipped,
        order=[p.name for p in trained.plans],
    )
    stage("downscale", lambda: downscale(cfg, prepared, trained, geojson=geojson))
    stage("evaluate", lambda: evaluate(cfg, prepared, trained, state["downscale"]))
    report["summary"] = state["evaluate"]
    _write_json(cfg.output_dir / RUN_REPORT_JSON, report)
    return report
