"""Command line entry point.

Each subcommand runs one stage against a JSON run configuration and keeps a
manifest of content hashes in the output directory. A stage whose inputs or
upstream artifacts changed since they were recorded refuses to run until the
upstream stage is re-run (or --force is given), so stale intermediate files
never silently flow into later stages. Exit status is 0 only when the stage
wrote its artifacts and every built-in invariant check passed.

The synth subcommand takes a small JSON document instead of a run
configuration: it names a world preset, a seed, and an output directory, and
writes a ready-to-run dataset including its config.json.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from dataclasses import replace
from pathlib import Path

from . import pipeline, synth
from .config import ConfigError, RunConfig, apply_env_overrides, load_config
from .ingest import IngestError, packaged_category_path
from .pipeline import PipelineError
from .synth import SynthError

MANIFEST_FILE = "manifest.json"

STAGES = ("prepare", "train", "downscale", "evaluate")

STAGE_DIRS = {
    "prepare": pipeline.PREPARED_DIR,
    "train": pipeline.MODELS_DIR,
    "downscale": pipeline.OUTPUT_DIR,
    "evaluate": pipeline.EVAL_DIR,
}

WORLD_PRESETS = {
    "demo": synth.demo_config,
    "scale_free": synth.scale_free_config,
    "scale_dependent": synth.scale_dependent_config,
    "strong_signal": synth.strong_signal_config,
}

WORLD_OVERRIDE_KEYS = ("zoom", "n_units", "n_points", "n_lines", "raster_cols")


class StaleError(Exception):
    pass


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def config_fingerprint(cfg: RunConfig) -> str:
    """Hash of the settings that determine results.

    Paths are left out: input files are hashed by content separately, and
    output_dir and jobs change where or how fast the run happens, not what
    it produces.
    """
    bbox = cfg.bbox
    doc = {
        "bbox": None if bbox is None else [bbox.west, bbox.south, bbox.east, bbox.north],
        "zoom": cfg.zoom,
        "seed": cfg.seed,
        "folds": cfg.folds,
        "min_training_units": cfg.min_training_units,
        "variables": [[v.name, v.kind, v.role] for v in cfg.variables],
        "rf_grid": (
            None
            if cfg.rf_grid is None
            else [
                [p.n_trees, p.max_depth, p.min_samples_leaf, p.mtry, p.bootstrap]
                for p in cfg.rf_grid
            ]
        ),
        "rf_grid_cap": cfg.rf_grid_cap,
        "fl_use_adjusted": cfg.fl_use_adjusted,
        "weighted_intensive": cfg.weighted_intensive,
        "prediction_model": cfg.prediction_model,
    }
    text = json.dumps(doc, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()


def input_hashes(cfg: RunConfig) -> dict[str, str]:
    labeled: list[tuple[str, Path]] = [("sources", cfg.sources)]
    if cfg.points is not None:
        labeled.append(("points", cfg.points))
    if cfg.lines is not None:
        labeled.append(("lines", cfg.lines))
    for name in sorted(cfg.rasters):
        labeled.append((f"raster:{name}", cfg.rasters[name]))
    labeled.append(("category_map", cfg.category_map or packaged_category_path()))
    if cfg.truth is not None:
        labeled.append(("truth", cfg.truth))
    return {label: _sha256(path) for label, path in labeled}


def stage_hashes(cfg: RunConfig, stage: str) -> dict[str, str]:
    root = cfg.output_dir / STAGE_DIRS[stage]
    files = sorted(p for p in root.rglob("*") if p.is_file())
    return {str(p.relative_to(cfg.output_dir)): _sha256(p) for p in files}


def load_manifest(cfg: RunConfig) -> dict | None:
    path = cfg.output_dir / MANIFEST_FILE
    if not path.is_file():
        return None
    return json.loads(path.read_text())


def record_stage(cfg: RunConfig, stage: str) -> None:
    if stage == "prepare":
        manifest = {"config": config_fingerprint(cfg), "inputs": input_hashes(cfg), "stages": {}}
    else:
        manifest = load_manifest(cfg) or {
            "config": config_fingerprint(cfg),
            "inputs": input_hashes(cfg),
            "stages": {},
        }
    manifest["stages"][stage] = stage_hashes(cfg, stage)
    for later in STAGES[STAGES.index(stage) + 1 :]:
        manifest["stages"].pop(later, None)
    path = cfg.output_dir / MANIFEST_FILE
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def check_fresh(cfg: RunConfig, stage: str) -> None:
    """Refuse to run a stage whose recorded inputs or artifacts went stale."""
    manifest = load_manifest(cfg)
    if manifest is None:
        raise StaleError(
            f"no manifest in {cfg.output_dir}; run 'downscale prepare' first"
        )
    reasons = []
    if manifest.get("config") != config_fingerprint(cfg):
        reasons.append("run settings changed since prepare")
    recorded = manifest.get("inputs", {})
    for label, digest in input_hashes(cfg).items():
        if recorded.get(label) != digest:
            reasons.append(f"input {label} changed since prepare")
    for upstream in STAGES[: STAGES.index(stage)]:
        outputs = manifest.get("stages", {}).get(upstream)
        if outputs is None:
            raise StaleError(
                f"no recorded '{upstream}' artifacts in {cfg.output_dir}; "
                f"run 'downscale {upstream}' first"
            )
        for rel, digest in outputs.items():
            path = cfg.output_dir / rel
            if not path.is_file():
                reasons.append(f"artifact {rel} from '{upstream}' is missing")
            elif _sha256(path) != digest:
                reasons.append(f"artifact {rel} from '{upstream}' was modified")
    if reasons:
        raise StaleError(
            f"stale artifacts for '{stage}': "
            + "; ".join(reasons)
            + "; re-run the upstream stages or pass --force"
        )


def cmd_prepare(cfg: RunConfig, args: argparse.Namespace) -> None:
    prepared = pipeline.prepare(cfg)
    record_stage(cfg, "prepare")
    complete = sum(1 for u in prepared.units if prepared.complete[u])
    print(
        f"prepared {len(prepared.units)} units ({complete} complete), "
        f"{len(prepared.frag_units)} fragments, {len(prepared.names)} covariates "
        f"-> {cfg.output_dir / pipeline.PREPARED_DIR}"
    )


def cmd_train(cfg: RunConfig, args: argparse.Namespace) -> None:
    if not args.force:
        check_fresh(cfg, "train")
    trained = pipeline.train(cfg)
    record_stage(cfg, "train")
    for plan in trained.plans:
        extras = ",".join(plan.extras) if plan.extras else "-"
        print(f"  {plan.name}: stage1={plan.stage1_score:.4f} extras={extras}")
    for name, reason in sorted(trained.skipped.items()):
        print(f"  {name}: skipped ({reason})")
    print(
        f"trained {len(trained.plans)} variables "
        f"-> {cfg.output_dir / pipeline.MODELS_DIR}"
    )


def cmd_downscale(cfg: RunConfig, args: argparse.Namespace) -> None:
    if not args.force:
        check_fresh(cfg, "downscale")
    result = pipeline.downscale(cfg, geojson=args.geojson)
    record_stage(cfg, "downscale")
    cells = len(result.target[result.variables[0]]) if result.variables else 0
    print(
        f"downscaled {len(result.variables)} variables onto {cells} cells "
        f"-> {cfg.output_dir / pipeline.OUTPUT_DIR / pipeline.OUTPUT_CSV}"
    )


def cmd_evaluate(cfg: RunConfig, args: argparse.Namespace) -> None:
    if not args.force:
        check_fresh(cfg, "evaluate")
    summary = pipeline.evaluate(cfg)
    record_stage(cfg, "evaluate")
    for name, score in sorted(summary["scale_consistency"].items()):
        print(f"  scale consistency {name}: {score:.4f}")
    for name, score in sorted(summary.get("recovery", {}).items()):
        print(f"  recovery {name}: {score:.4f}")
    print(f"evaluation written -> {cfg.output_dir / pipeline.EVAL_DIR}")


def load_world_spec(path: Path) -> tuple[synth.SynthConfig, str, Path]:
    try:
        doc = json.loads(path.read_text())
    except OSError as exc:
        raise SynthError(f"cannot read world spec {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise SynthError(
            f"{path}: invalid JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}"
        ) from exc
    if not isinstance(doc, dict):
        raise SynthError(f"{path}: world spec must be a JSON object")
    known = {"preset", "seed", "out_dir", *WORLD_OVERRIDE_KEYS}
    unknown = set(doc) - known
    if unknown:
        raise SynthError(f"{path}: unknown world spec keys: {', '.join(sorted(unknown))}")
    preset = doc.get("preset", "demo")
    if preset not in WORLD_PRESETS:
        raise SynthError(
            f"{path}: 'preset' must be one of {sorted(WORLD_PRESETS)}, got {preset!r}"
        )
    seed = doc.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        raise SynthError(f"{path}: 'seed' must be a non-negative integer, got {seed!r}")
    out_dir = doc.get("out_dir", "world")
    if not isinstance(out_dir, str) or not out_dir:
        raise SynthError(f"{path}: 'out_dir' must be a path string, got {out_dir!r}")
    overrides = {}
    for key in WORLD_OVERRIDE_KEYS:
        if key in doc:
            value = doc[key]
            if not isinstance(value, int) or isinstance(value, bool) or value <= 0:
                raise SynthError(f"{path}: '{key}' must be a positive integer, got {value!r}")
            overrides[key] = value
    cfg = WORLD_PRESETS[preset](seed=seed, **overrides)
    return cfg, preset, (path.parent / out_dir).resolve()


def cmd_synth(args: argparse.Namespace) -> None:
    cfg, preset, out_dir = load_world_spec(Path(args.config))
    world = synth.generate_world(cfg, out_dir)
    for label in sorted(world.files):
        print(f"  {label}: {world.files[label]}")
    print(
        f"world '{preset}' seed {cfg.seed}: {len(world.unit_ids)} units, "
        f"{len(world.fragments)} fragments -> {out_dir}"
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="downscale",
        description="Downscale coarse-support variables onto a fine quadkey grid.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, text in [
        ("prepare", "build the covariate design matrices and support tables"),
        ("train", "fit the model stack and write the evaluation report"),
        ("downscale", "predict, anchor, and write the per-cell output table"),
        ("evaluate", "write scale-consistency and recovery diagnostics"),
        ("synth", "generate a synthetic world from a world spec"),
    ]:
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", required=True, help="path to the JSON configuration")
        p.add_argument(
            "--force", action="store_true", help="run even when recorded artifacts are stale"
        )
        p.add_argument(
            "--geojson", action="store_true", help="also write per-cell GeoJSON (downscale only)"
        )
        p.add_argument("--jobs", type=int, default=None, help="worker process cap")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "synth":
            cmd_synth(args)
            return 0
        cfg = apply_env_overrides(load_config(args.config))
        if args.jobs is not None:
            if args.jobs < 1:
                raise ConfigError(f"--jobs must be >= 1, got {args.jobs}")
            cfg = replace(cfg, jobs=args.jobs)
        handler = {
            "prepare": cmd_prepare,
            "train": cmd_train,
            "downscale": cmd_downscale,
            "evaluate": cmd_evaluate,
        }[args.command]
        handler(cfg, args)
        return 0
    except (ConfigError, IngestError, PipelineError, SynthError, StaleError) as exc:
        print(f"downscale {args.command}: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"downscale {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
