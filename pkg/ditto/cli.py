"""
Command-line entry point: python -m ditto <subcommand>.

  gen-data         solve a PDE family and write a dataset container
  train            train a model on a dataset
  eval             superres / extrap / noise evaluation -> report.csv
  rollout          bundled rollout of one test trajectory
  pod              POD reduced-coefficient pipeline
  report           merge report CSVs, optionally plot them
  validate-config  resolve and echo a config file
  recipes          list experiment presets

Exit codes: 0 success, 2 configuration/input error, 3 numerical failure.
"""

import argparse
import json
import logging
import sys
import time
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

from ditto import __version__
from ditto.errors import CheckpointError, ConfigError, NumericalError
from ditto.recipes import RECIPES, ExperimentRecipe, get_recipe, recipe_for_kind

logger = logging.getLogger(__name__)

PDE_ALIASES = {"burgers": "burgers", "ns": "navier_stokes", "navier_stokes": "navier_stokes",
               "wave2d": "wave2d", "wave3d": "wave3d"}


# ============================================================================
# HELPERS
# ============================================================================

def parse_grid(values: Sequence[str]) -> tuple:
    """'128', '64x64' or '64 64' -> tuple of ints."""
    sizes = []
    for value in values:
        for part in str(value).lower().split("x"):
            try:
                sizes.append(int(part))
            except ValueError as exc:
                raise ConfigError(f"grid sizes must be integers, got {value!r}") from exc
    return tuple(sizes)


def load_recipe(args: argparse.Namespace) -> ExperimentRecipe:
    from ditto.configuration import resolve_config, validate_config

    if getattr(args, "config", None):
        return validate_config(args.config, getattr(args, "recipe", None))
    return resolve_config({}, getattr(args, "recipe", None))


def _jsonable(value: Any) -> Any:
    if isinstance(value, Path):
        return str(value)
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, np.generic):
        return value.item()
    return value


def write_run_record(out_dir: Path, command: str, args: argparse.Namespace, started: float,
                     recipe: Optional[ExperimentRecipe] = None, seeds: Optional[Dict[str, int]] = None) -> Path:
    """Provenance record: config echo, seeds, code version and wall time."""
    from ditto.storage import write_json_atomic

    arguments = {k: _jsonable(v) for k, v in vars(args).items() if k != "handler"}
    record = {
        "command": command,
        "arguments": arguments,
        "config": recipe.to_manifest_properties() if recipe else None,
        "seeds": seeds or {},
        "code_version": __version__,
        "wall_time_seconds": round(time.time() - started, 3),
    }
    path = Path(out_dir) / "run.json"
    write_json_atomic(path, record)
    return path


def _out_dir(args: argparse.Namespace, recipe: Optional[ExperimentRecipe] = None) -> Path:
    out = args.out or (recipe.output_dir if recipe else None)
    if not out:
        raise ConfigError("an output directory is required (--out or output_dir in the config)")
    return Path(out)


def _data_dir(args: argparse.Namespace, recipe: Optional[ExperimentRecipe] = None) -> Path:
    data = args.data or (recipe.dataset_path if recipe else None)
    if not data:
        raise ConfigError("a dataset is required (--data or dataset_path in the config)")
    return Path(data)


def prepare_training_bundle(recipe: ExperimentRecipe, bundle):
    """Truncate to the training horizon or subsample to N_t^train."""
    from ditto.datagen import subsample_times, truncate_times

    if recipe.eval.train_horizon is not None:
        return truncate_times(bundle, recipe.eval.train_horizon)
    if recipe.data.train_steps is not None and recipe.data.train_steps != bundle.T:
        return subsample_times(bundle, recipe.data.train_steps)
    return bundle


def _summary(title: str, lines: List[str]) -> None:
    print("\n" + "=" * 60)
    print(title)
    print("=" * 60)
    for line in lines:
        print(line)
    print("=" * 60)


# ============================================================================
# SUBCOMMANDS
# ============================================================================

def cmd_gen_data(args: argparse.Namespace) -> int:
    """Generate a dataset container."""
    from dataclasses import replace

    from ditto.datagen import generate_bundle
    from ditto.storage import save_dataset

    started = time.time()
    if args.config or args.recipe:
        recipe = load_recipe(args)
    else:
        recipe = recipe_for_kind(PDE_ALIASES[args.pde or "burgers"])
        from ditto.configuration import apply_environment
        recipe = apply_environment(recipe)
    if args.pde and PDE_ALIASES[args.pde] != recipe.pde.kind:
        raise ConfigError(f"--pde {args.pde} conflicts with recipe {recipe.name!r} ({recipe.pde.kind})")

    pde = recipe.pde
    overrides = {}
    if args.nu is not None:
        overrides["viscosity"] = args.nu
    if args.t_final is not None:
        overrides["t_final"] = args.t_final
    if args.steps is not None:
        overrides["n_steps"] = args.steps
    if args.grid:
        overrides["grid"] = parse_grid(args.grid)
    if args.forcing is not None:
        overrides["forcing_id"] = args.forcing
    if args.wave_speed is not None:
        overrides["wave_speed_id"] = args.wave_speed
    pde = replace(pde, **overrides)
    pde.validate()
    count = args.count if args.count is not None else recipe.data.count
    seed = args.seed if args.seed is not None else recipe.data.seed
    out_dir = _out_dir(args, recipe)

    print(f"Generating {pde.kind} dataset")
    print("=" * 60)
    if not args.quiet:
        pde.print_cli()
    workers = args.workers if args.workers is not None else recipe.data.workers
    print(f"\n1. Solving {count} trajectories (seed={seed}, workers={workers})...")
    bundle = generate_bundle(pde, count, seed, ratios=recipe.data.ratios, workers=workers,
                             progress=not args.quiet)
    print(f"   ✓ Generated {bundle.M} trajectories")
    print(f"\n2. Writing to {out_dir}...")
    save_dataset(bundle, out_dir)
    write_run_record(out_dir, "gen-data", args, started, recipe=replace(recipe, pde=pde),
                     seeds={"data": int(seed)})
    print("   ✓ Data written successfully")

    counts = bundle.split_counts()
    _summary("SUMMARY", [
        f"Trajectories: {bundle.M}",
        f"  - train: {counts['train']}",
        f"  - val: {counts['val']}",
        f"  - test: {counts['test']}",
        f"Snapshots per trajectory: {bundle.T + 1}",
        f"\nOutput directory: {out_dir}",
    ])
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    """Train a model from a recipe/config on a stored dataset."""
    from dataclasses import replace

    from ditto.configuration import device, echo
    from ditto.network import build_model, parameter_count
    from ditto.storage import load_dataset, write_text_atomic
    from ditto.training import train

    started = time.time()
    recipe = load_recipe(args)
    if args.epochs is not None:
        recipe = replace(recipe, optimizer=replace(recipe.optimizer, epochs=args.epochs))
        recipe.validate()
    data_dir, out_dir = _data_dir(args, recipe), _out_dir(args, recipe)

    print(f"Training {recipe.model.variant} ({recipe.name})")
    print("=" * 60)
    print(f"\n1. Loading dataset {data_dir}...")
    bundle = prepare_training_bundle(recipe, load_dataset(data_dir))
    if bundle.spatial_shape != tuple(recipe.model.grid_shape):
        raise ConfigError(f"dataset grid {bundle.spatial_shape} does not match model grid {recipe.model.grid_shape}")
    print(f"   ✓ {bundle.M} trajectories, T={bundle.T}")

    print("\n2. Building model...")
    model = build_model(recipe.model).to(device())
    print(f"   ✓ {parameter_count(recipe.model)} parameters on {device()}")
    if not args.quiet:
        recipe.print_cli()

    print("\n3. Training...")
    result = train(model, bundle, recipe.training, recipe.loss, recipe.optimizer, progress=not args.quiet,
                   output_dir=out_dir)
    write_text_atomic(out_dir / "config.json", echo(recipe))
    write_run_record(out_dir, "train", args, started, recipe=recipe,
                     seeds={"model": recipe.model.seed, "optimizer": recipe.optimizer.seed})
    print("   ✓ Checkpoint and history written")
    if not args.quiet:
        result.print_cli()

    _summary("SUMMARY", [
        f"Epochs: {len(result.history)}",
        f"Best validation rel-L2: {result.best_val_loss:.4e} (epoch {result.best_epoch})",
        f"\nCheckpoint: {out_dir / 'checkpoint'}",
        f"History:    {out_dir / 'history.csv'}",
    ])
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    """Evaluate one or more checkpoints and write report.csv."""
    from ditto.configuration import device
    from ditto.rollout import eval_extrapolation, eval_superresolution, noise_sweep, report_csv
    from ditto.schema import EvalReport, RolloutConfig
    from ditto.storage import load_checkpoint, load_dataset, write_text_atomic

    started = time.time()
    recipe = load_recipe(args)
    plan = recipe.eval
    data_dir, out_dir = _data_dir(args, recipe), _out_dir(args, recipe)
    scenario = args.scenario or recipe.name
    bundle = load_dataset(data_dir)

    print(f"Evaluating ({args.mode}) on {data_dir}")
    print("=" * 60)
    report = EvalReport()
    evaluated, failed = 0, 0
    for idx, checkpoint in enumerate(args.checkpoint, 1):
        print(f"\n[{idx}] {checkpoint}")
        print("-" * 60)
        try:
            model, extra = load_checkpoint(checkpoint, device())
            if args.mode == "superres":
                part = eval_superresolution(model, bundle, args.resolutions or plan.resolutions, scenario)
            elif args.mode == "extrap":
                lf = args.lf or extra.get("lf") or 1
                horizon = args.horizon or plan.horizon or bundle.T
                cfg = RolloutConfig(lf=lf, horizon=horizon, train_horizon=plan.train_horizon,
                                    condition_on_offset=extra.get("condition_on_offset", True))
                part = eval_extrapolation(model, bundle, cfg, scenario)
            else:
                part = noise_sweep(model, bundle, args.gammas or plan.gammas, seeds=args.seeds or plan.noise_seeds,
                                   scenario=scenario)
            report.extend(part)
            for row in part.rows:
                if row.axis != "step":
                    print(f"  ✓ {row.axis}={row.value:g}: rel-L2 {row.mean:.4e} +- {row.std:.2e}")
            evaluated += 1
        except NumericalError as exc:
            print(f"  ✗ Error: {exc}")
            failed += 1

    write_text_atomic(out_dir / "report.csv", report_csv(report))
    write_run_record(out_dir, "eval", args, started, recipe=recipe,
                     seeds={"noise": list(args.seeds or plan.noise_seeds)})
    _summary("SUMMARY", [
        f"  ✓ Evaluated: {evaluated}",
        f"  ✗ Failed: {failed}",
        f"  Rows: {len(report.rows)}",
        f"\nReport: {out_dir / 'report.csv'}",
    ])
    return 0 if failed == 0 else 3


def cmd_rollout(args: argparse.Namespace) -> int:
    """Roll out one test trajectory and store it as a single-trajectory dataset."""
    from ditto.configuration import device
    from ditto.rollout import rel_l2_error, rollout_bundled
    from ditto.schema import DatasetBundle, RolloutConfig
    from ditto.storage import load_checkpoint, load_dataset, save_dataset

    started = time.time()
    model, extra = load_checkpoint(args.checkpoint, device())
    bundle = load_dataset(args.data)
    test = bundle.subset("test")
    if not 0 <= args.index < test.M:
        raise ConfigError(f"test trajectory index {args.index} outside 0..{test.M - 1}")
    lf = args.lf or extra.get("lf") or 1
    horizon = args.horizon or test.T
    cfg = RolloutConfig(lf=lf, horizon=horizon, condition_on_offset=extra.get("condition_on_offset", True))
    dt = float(test.times[1] - test.times[0])
    out_dir = Path(args.out)

    print(f"Rolling out test trajectory {args.index} (lf={lf}, horizon={horizon})")
    print("=" * 60)
    traj = rollout_bundled(model, test.fields[args.index, 0], cfg, dt, test.grid)
    if traj.metadata["truncated_at"] is not None:
        print(f"  ✗ Truncated at step {traj.metadata['truncated_at']}: non-finite prediction")
    saved = DatasetBundle.from_trajectories("rollout", [traj], seeds=[test.seeds[args.index]], splits=["test"],
                                            pde=bundle.pde)
    save_dataset(saved, out_dir)
    write_run_record(out_dir, "rollout", args, started)

    lines = [f"Leaps: {traj.metadata['leaps']}", f"Steps produced: {traj.T}"]
    if traj.T <= test.T:
        lines.append(f"Final-step rel-L2: {rel_l2_error(traj.fields[-1], test.fields[args.index, traj.T]):.4e}")
    lines.append(f"\nOutput directory: {out_dir}")
    _summary("SUMMARY", lines)
    return 0


def cmd_pod(args: argparse.Namespace) -> int:
    """Run the POD reduced-coefficient pipeline."""
    from ditto.pod import energy_fraction, pod_pipeline, save_basis
    from ditto.rollout import report_csv
    from ditto.schema import OptimizerConfig
    from ditto.storage import load_dataset, save_checkpoint, write_text_atomic

    started = time.time()
    bundle = load_dataset(args.data)
    out_dir = Path(args.out)
    opt_cfg = OptimizerConfig(epochs=args.epochs, batch_size=args.batch_size, seed=args.seed)

    print(f"POD pipeline on {args.data} (r={args.modes}, lf={args.lf})")
    print("=" * 60)
    result = pod_pipeline(bundle, r=args.modes, lf=args.lf, opt_cfg=opt_cfg, horizon=args.horizon,
                          ratios=tuple(args.ratios), progress=not args.quiet)
    save_basis(result.basis, out_dir / "basis", extra={"coefficient_scale": result.coefficient_scale.tolist()})
    save_checkpoint(result.model, out_dir / "checkpoint",
                    extra={"lf": args.lf, "condition_on_offset": True,
                           "coefficient_scale": result.coefficient_scale.tolist()})
    write_text_atomic(out_dir / "report.csv", report_csv(result.report))
    write_run_record(out_dir, "pod", args, started, seeds={"optimizer": args.seed})
    if not args.quiet:
        result.print_cli()

    horizon_rows = result.report.select("horizon")
    _summary("SUMMARY", [
        f"Modes: {result.basis.r} (energy {energy_fraction(result.basis)[-1]:.6f})",
        f"Sub-trajectories: {result.sub_trajectories}",
        f"Field rel-L2: {horizon_rows[0].mean:.4e}" if horizon_rows else "Field rel-L2: n/a",
        f"\nOutput directory: {out_dir}",
    ])
    return 0


def cmd_report(args: argparse.Namespace) -> int:
    """Merge stored report CSVs; plots come from the merged rows only."""
    from ditto.rollout import parse_report_csv, report_csv
    from ditto.schema import EvalReport
    from ditto.storage import write_text_atomic

    merged = EvalReport()
    for path in args.inputs:
        try:
            merged.extend(parse_report_csv(Path(path).read_text(encoding="utf-8")))
        except OSError as exc:
            raise ConfigError(f"cannot read report {path}: {exc}") from exc
    out_dir = Path(args.out)
    write_text_atomic(out_dir / "report.csv", report_csv(merged))
    lines = [f"Rows: {len(merged.rows)}", f"Report: {out_dir / 'report.csv'}"]
    if args.plot:
        from ditto.plotting import plot_report

        for axis, path in plot_report(merged.rows, out_dir).items():
            lines.append(f"  ✓ {axis}: {path}")
    if not args.quiet:
        merged.print_cli()
    _summary("SUMMARY", lines)
    return 0


def cmd_validate_config(args: argparse.Namespace) -> int:
    from ditto.configuration import echo, validate_config

    recipe = validate_config(args.path, args.recipe)
    sys.stdout.write(echo(recipe))
    print(f"✓ {args.path} is valid (recipe {recipe.name})")
    return 0


def cmd_recipes(args: argparse.Namespace) -> int:
    if args.show:
        from ditto.configuration import echo

        sys.stdout.write(echo(get_recipe(args.show)))
        return 0
    print("Experiment recipes")
    print("=" * 60)
    for name in sorted(RECIPES):
        print(f"  {name:<22} {RECIPES[name].description}")
    return 0


# ============================================================================
# PARSER
# ============================================================================

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ditto", description="Time-conditioned neural operators for PDEs")
    parser.add_argument("--version", action="version", version=f"ditto {__version__}")
    parser.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    parser.add_argument("--quiet", action="store_true", help="no progress bars or detail boxes")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", help="JSON experiment config")
        p.add_argument("--recipe", choices=sorted(RECIPES), help="preset to start from")

    p = sub.add_parser("gen-data", help="solve a PDE family and write a dataset")
    with_config(p)
    p.add_argument("--pde", choices=sorted(PDE_ALIASES))
    p.add_argument("--nu", type=float)
    p.add_argument("--t-final", type=float)
    p.add_argument("--steps", type=int, help="stored snapshots after t=0")
    p.add_argument("--grid", nargs="+", help="e.g. 128, 64x64 or 32 32 32")
    p.add_argument("--forcing", choices=["none", "diagonal_sincos"])
    p.add_argument("--wave-speed", choices=["unit", "sin_product", "sin_product_3d"])
    p.add_argument("--count", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--out")
    p.set_defaults(handler=cmd_gen_data)

    p = sub.add_parser("train", help="train a model")
    with_config(p)
    p.add_argument("--data")
    p.add_argument("--epochs", type=int)
    p.add_argument("--out")
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("eval", help="evaluate checkpoints")
    with_config(p)
    p.add_argument("--checkpoint", nargs="+", required=True)
    p.add_argument("--data")
    p.add_argument("--mode", choices=["superres", "extrap", "noise"], required=True)
    p.add_argument("--resolutions", nargs="+", type=int)
    p.add_argument("--gammas", nargs="+", type=float)
    p.add_argument("--seeds", nargs="+", type=int)
    p.add_argument("--lf", type=int)
    p.add_argument("--horizon", type=int)
    p.add_argument("--scenario")
    p.add_argument("--out")
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("rollout", help="bundled rollout of one test trajectory")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--lf", type=int)
    p.add_argument("--horizon", type=int)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_rollout)

    p = sub.add_parser("pod", help="POD reduced-coefficient pipeline")
    p.add_argument("--data", required=True)
    p.add_argument("--modes", type=int, default=5)
    p.add_argument("--lf", type=int, required=True)
    p.add_argument("--horizon", type=int)
    p.add_argument("--ratios", nargs=3, type=float, default=[0.3, 0.2, 0.5])
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_pod)

    p = sub.add_parser("report", help="merge report CSVs and plot them")
    p.add_argument("--inputs", nargs="+", required=True)
    p.add_argument("--plot", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_report)

    p = sub.add_parser("validate-config", help="resolve and echo a config file")
    p.add_argument("path")
    p.add_argument("--recipe", choices=sorted(RECIPES))
    p.set_defaults(handler=cmd_validate_config)

    p = sub.add_parser("recipes", help="list experiment presets")
    p.add_argument("--show", choices=sorted(RECIPES))
    p.set_defaults(handler=cmd_recipes)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.handler(args)
    except ConfigError as exc:
        print(f"\n✗ Config error: {exc}", file=sys.stderr)
        for message in exc.errors:
            print(f"  - {message}", file=sys.stderr)
        return 2
    except CheckpointError as exc:
        print(f"\n✗ Artifact error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"\n✗ Numerical failure: {exc}", file=sys.stderr)
        return 3
