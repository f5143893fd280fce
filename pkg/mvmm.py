#!/usr/bin/env python3
"""
MvMM Segmentation Suite - Command Line
======================================

Entry point for the suite's pipelines. The `mvmm` launcher next to this file
runs it as a command (`./mvmm ...`); `python mvmm.py ...` is equivalent:

    mvmm phantom [SPEC] -o DIR        synthetic multi-sequence phantom + truth + atlas
    mvmm segment CONFIG               joint segmentation/registration run
    mvmm evaluate --seg ... --truth ... --labels ...
                                      Dice / contour distance table
    mvmm ablate CONFIG                the four registration presets side by side
    mvmm dimensions [SPEC]            one, two and three sequence runs on one phantom

Environment (``.env`` is honoured): ``MVMM_WORKERS`` sets the default worker
count, ``MVMM_LOG_LEVEL`` the log level.

Exit status: 0 success, 1 validation error, 2 numerical failure,
3 partial failure (an evaluation row or ablation preset failed).

Author: MvMM Segmentation Team
Version: 1.0.0
"""

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from dotenv import load_dotenv

from em_engine import hard_segmentation, label_counts
from icm_driver import Schedule, SchedulePreset, run_icm, schedule_from_config
from mvmm_errors import (
    EXIT_OK,
    EXIT_PARTIAL,
    EXIT_VALIDATION,
    ConfigError,
    EvaluationError,
    MvmmError,
)
from mvmm_io import (
    RunConfig,
    format_run_config,
    read_label_volume,
    read_phantom_spec,
    read_run_config,
    write_ll_trace,
    write_params,
    write_table,
    write_transforms,
    write_volume,
)
from mvmm_model import AtlasPrior
from phantom_metrics import PhantomSpec, acd, dice, generate_phantom, renoised
from transforms import SliceTransformMode, TransformState
from volume_core import LabelVolume, MultivariateImageSet

logger = logging.getLogger("mvmm")
runlog = logging.getLogger("mvmm.runlog")

RULE = "=" * 72


def banner(title: str) -> None:
    print(RULE)
    print(title)
    print(RULE)


def default_workers() -> int:
    raw = os.environ.get("MVMM_WORKERS", "1")
    try:
        workers = int(raw)
    except ValueError:
        raise ConfigError(f"expected an integer, got '{raw}'", key="MVMM_WORKERS")
    if workers < 1:
        raise ConfigError("must be >= 1", key="MVMM_WORKERS")
    return workers


def configure_logging(level: Optional[str] = None) -> None:
    name = (level or os.environ.get("MVMM_LOG_LEVEL", "INFO")).upper()
    if not isinstance(logging.getLevelName(name), int):
        raise ConfigError(f"unknown log level '{name}'", key="MVMM_LOG_LEVEL")
    logging.basicConfig(level=name, format="%(asctime)s %(levelname)-7s %(name)s: %(message)s")


def _prepare_output(directory: Path) -> Path:
    if directory.exists() and not directory.is_dir():
        raise ConfigError("output path exists and is not a directory", path=str(directory))
    return directory


# ---------------------------------------------------------------- evaluation

def evaluate_labels(seg: LabelVolume, truth: LabelVolume, labels: Sequence[int],
                    **columns) -> List[Dict[str, object]]:
    """
    One metrics row per label; failures become rows with ``status`` set.

    Extra keyword columns are copied into every row.
    """
    rows = []
    for k in labels:
        row = dict(columns, label=int(k), dice=np.nan, acd=np.nan, status="ok")
        try:
            row["dice"] = dice(seg, truth, k)
            row["acd"] = acd(seg, truth, k)
        except EvaluationError as exc:
            logger.warning("label %d: %s", k, exc)
            row["status"] = status_token(exc)
        rows.append(row)
    return rows


def aggregate_metrics(frame: pd.DataFrame, by: Sequence[str]) -> pd.DataFrame:
    """Mean and sample standard deviation of Dice/ACD over the successful rows."""
    ok = frame[frame["status"] == "ok"]
    grouped = ok.groupby(list(by), sort=True)
    summary = grouped.agg(cases=("dice", "size"), dice_mean=("dice", "mean"),
                          dice_std=("dice", "std"), acd_mean=("acd", "mean"),
                          acd_std=("acd", "std"))
    return summary.reset_index()


def status_token(exc: Exception) -> str:
    """Status value of a failed row; one token, like every other table cell."""
    return f"error:{type(exc).__name__}"


def _rows_failed(rows: List[Dict[str, object]]) -> bool:
    return any(row["status"] != "ok" for row in rows)


# ---------------------------------------------------------------- phantom

def write_phantom(spec: PhantomSpec, out_dir: Path) -> List[Path]:
    """Generate the phantom for ``spec`` and write its file set into ``out_dir``."""
    images, truth = generate_phantom(spec)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for name, grid in zip(images.names, images.images):
        written.append(write_volume(out_dir / f"{name}.vhdr", grid))
    written.append(write_volume(out_dir / "truth_labels.vhdr", truth.labels))
    written.append(write_volume(out_dir / "truth_tissues.vhdr", truth.tissues))
    atlas_files = []
    for position, k in enumerate(truth.atlas.labels):
        atlas_files.append(write_volume(out_dir / f"atlas_{k}.vhdr", truth.atlas.maps[position]))
    written += atlas_files

    state = TransformState.identity([grid.lattice for grid in images.images], images.common_space,
                                    SliceTransformMode.RIGID, spec.ffd_spacing_mm)
    for i, shifts in enumerate(truth.shifts):
        state.slices.params[i][:, :2] = shifts
    if truth.ffd is not None:
        state = state.replace(ffd=truth.ffd)
    written.append(write_transforms(out_dir / "truth_transforms.txt", state,
                                    header="slice records: correcting shifts; ffd: deformation "
                                           "applied to the atlas"))

    coverage = []
    for name, grid in zip(images.names, images.images):
        lo, hi = grid.lattice.hull()
        record = truth.truncations.get(name)
        coverage.append({"sequence": name,
                         "lo_x": lo[0], "lo_y": lo[1], "lo_z": lo[2],
                         "hi_x": hi[0], "hi_y": hi[1], "hi_z": hi[2],
                         "truncated_axis": record.axis if record else -1,
                         "truncated_end": record.end if record else "none",
                         "truncated_mm": record.extent_mm if record else 0.0})
    written.append(write_table(out_dir / "coverage.txt", pd.DataFrame(coverage)))

    config_text = format_run_config(
        images=[f"{name}.vhdr" for name in images.names], names=images.names,
        atlas=[p.name for p in atlas_files], common_space="truth_labels.vhdr",
        labels=spec.label_config(), truth="truth_labels.vhdr", seed=spec.seed)
    config_path = out_dir / "segment.cfg"
    config_path.write_text(config_text, encoding="utf-8")
    written.append(config_path)
    return written


def cmd_phantom(args: argparse.Namespace) -> int:
    spec = read_phantom_spec(args.spec) if args.spec else PhantomSpec()
    if args.seed is not None:
        spec.seed = args.seed
    out_dir = _prepare_output(Path(args.output))
    banner("MvMM PHANTOM")
    print(f"Sequences:   {', '.join(seq.name for seq in spec.sequences)}")
    print(f"Lattice:     {spec.dims} @ {spec.spacing} mm")
    print(f"Seed:        {spec.seed}")
    written = write_phantom(spec, out_dir)
    print(f"Wrote {len(written)} files to {out_dir}")
    return EXIT_OK


# ---------------------------------------------------------------- segment

def _attach_run_log(path: Path) -> logging.Handler:
    handler = logging.FileHandler(path, mode="w", encoding="utf-8")
    handler.setFormatter(logging.Formatter("%(message)s"))
    runlog.addHandler(handler)
    runlog.setLevel(logging.INFO)
    return handler


def _load_run(config: RunConfig) -> Tuple[MultivariateImageSet, AtlasPrior, Optional[LabelVolume]]:
    images = config.load_images()
    atlas = config.load_atlas()
    truth = config.load_truth()
    if truth is not None and truth.lattice != images.common_space:
        raise ConfigError("truth lattice differs from the common space", key="truth",
                          path=str(config.path))
    return images, atlas, truth


def _resolve_workers(requested: Optional[int], config: RunConfig) -> int:
    workers = requested or config.workers or default_workers()
    if workers < 1:
        raise ConfigError("must be >= 1", key="workers")
    return workers


def _preset_schedule(config: RunConfig, preset: SchedulePreset) -> Schedule:
    entries = {k: v for k, v in config.schedule_entries.items()
               if k not in ("preset", "enable_sc", "enable_ffd")}
    entries["preset"] = preset.value
    return schedule_from_config(entries)


def cmd_segment(args: argparse.Namespace) -> int:
    config = read_run_config(args.config)
    images, atlas, truth = _load_run(config)
    workers = _resolve_workers(args.workers, config)
    schedule = (_preset_schedule(config, SchedulePreset(args.preset)) if args.preset
                else config.schedule)
    out_dir = _prepare_output(Path(args.output) if args.output else config.output)

    banner("MvMM SEGMENTATION")
    print(f"Config:      {config.path}")
    print(f"Images:      {', '.join(images.names)}")
    print(f"Schedule:    {schedule.describe()}")
    print(f"Workers:     {workers}   Seed: {config.seed}")

    out_dir.mkdir(parents=True, exist_ok=True)
    handler = _attach_run_log(out_dir / "run.log")
    try:
        state = run_icm(images, atlas, config.labels, schedule, workers=workers, seed=config.seed)
    finally:
        runlog.removeHandler(handler)
        handler.close()

    labels = config.labels.labels
    segmentation = hard_segmentation(state.posteriors, labels, images, state.transforms)
    write_volume(out_dir / "seg_common.vhdr", segmentation.common)
    for name, volume in zip(images.names, segmentation.per_image):
        write_volume(out_dir / f"seg_{name}.vhdr", volume)
    if config.write_posteriors:
        for position, k in enumerate(labels):
            grid = images.common_space.with_values(
                state.posteriors.dense_label_posterior(position))
            write_volume(out_dir / f"posterior_{k}.vhdr", grid)
    write_params(out_dir / "params.txt", state.params)
    write_transforms(out_dir / "transforms.txt", state.transforms)
    write_ll_trace(out_dir / "ll_trace.txt", state.ll_trace)

    print(f"\nRounds: {state.round}  converged: {state.converged}  "
          f"final LL: {state.log_likelihood:.6f}")
    counts = label_counts(segmentation.common, labels)
    for k in labels:
        print(f"  label {k:<4}: {counts[k]:>8} voxels")
    status = EXIT_OK
    if truth is not None:
        rows = evaluate_labels(segmentation.common, truth, labels, image="common")
        frame = pd.DataFrame(rows)
        write_table(out_dir / "metrics.txt", frame)
        print("\n" + frame.to_string(index=False))
        if _rows_failed(rows):
            status = EXIT_PARTIAL
    print(f"\nOutputs written to {out_dir}")
    return status


# ---------------------------------------------------------------- evaluate

def cmd_evaluate(args: argparse.Namespace) -> int:
    if len(args.seg) != len(args.truth):
        raise ConfigError(f"{len(args.seg)} segmentations for {len(args.truth)} truth volumes",
                          key="--truth")
    pairs = [(read_label_volume(s), read_label_volume(t)) for s, t in zip(args.seg, args.truth)]
    rows = []
    for case, ((seg, truth), path) in enumerate(zip(pairs, args.seg)):
        rows += evaluate_labels(seg, truth, args.labels, case=case, image=Path(path).stem)
    frame = pd.DataFrame(rows)
    summary = aggregate_metrics(frame, ["label"])

    banner("MvMM EVALUATION")
    print(frame.to_string(index=False))
    print("\nAggregate (mean ± sample std):")
    for _, row in summary.iterrows():
        print(f"  label {int(row['label']):<4} Dice {row['dice_mean']:.4f} ± {row['dice_std']:.4f}"
              f"   ACD {row['acd_mean']:.4f} ± {row['acd_std']:.4f} mm   (n={int(row['cases'])})")
    if args.output:
        out = Path(args.output)
        out.parent.mkdir(parents=True, exist_ok=True)
        write_table(out, frame)
        write_table(out.with_name(out.stem + "_summary" + out.suffix), summary)
    return EXIT_PARTIAL if _rows_failed(rows) else EXIT_OK


# ---------------------------------------------------------------- ablate

def run_ablation(images: MultivariateImageSet, atlas: AtlasPrior, config: RunConfig,
                 truth: LabelVolume, workers: int) -> pd.DataFrame:
    """Run every registration preset on the same inputs; a failing preset yields error rows."""
    rows = []
    labels = config.labels.labels
    for preset in SchedulePreset:
        schedule = _preset_schedule(config, preset)
        try:
            state = run_icm(images, atlas, config.labels, schedule, workers=workers,
                            seed=config.seed)
        except MvmmError as exc:
            logger.error("preset %s failed: %s", preset.value, exc)
            rows += [{"preset": preset.value, "label": int(k), "dice": np.nan, "acd": np.nan,
                      "log_likelihood": np.nan, "status": status_token(exc)} for k in labels]
            continue
        segmentation = hard_segmentation(state.posteriors, labels)
        rows += evaluate_labels(segmentation.common, truth, labels, preset=preset.value,
                                log_likelihood=state.log_likelihood)
    frame = pd.DataFrame(rows)
    return frame[["preset", "label", "dice", "acd", "log_likelihood", "status"]]


def cmd_ablate(args: argparse.Namespace) -> int:
    config = read_run_config(args.config)
    images, atlas, truth = _load_run(config)
    if truth is None:
        raise ConfigError("ablation needs a truth volume", key="truth", path=str(config.path))
    workers = _resolve_workers(args.workers, config)
    out_dir = _prepare_output(Path(args.output) if args.output else config.output)

    banner("MvMM REGISTRATION ABLATION")
    frame = run_ablation(images, atlas, config, truth, workers)
    print(frame.to_string(index=False))
    out_dir.mkdir(parents=True, exist_ok=True)
    write_table(out_dir / "ablation.txt", frame)
    print(f"\nTable written to {out_dir / 'ablation.txt'}")
    return EXIT_PARTIAL if (frame["status"] != "ok").any() else EXIT_OK


# ---------------------------------------------------------------- dimensions

def dimension_order(names: Sequence[str], requested: Optional[Sequence[str]] = None) -> List[int]:
    """Image indices in the order sequences are added; LGE first when present."""
    if requested:
        missing = [n for n in requested if n not in names]
        if missing:
            raise ConfigError(f"unknown sequence '{missing[0]}'", key="--order")
        return [list(names).index(n) for n in requested]
    order = list(range(len(names)))
    if "lge" in names:
        first = list(names).index("lge")
        order.remove(first)
        order.insert(0, first)
    return order


def setting_name(n_images: int) -> str:
    return "UvMM1" if n_images == 1 else f"MvMM{n_images}"


def run_dimension_study(spec: PhantomSpec, seeds: Sequence[int], schedule: Schedule,
                        order: Optional[Sequence[str]] = None, workers: int = 1) -> pd.DataFrame:
    """
    Segment one phantom with the first one, two, ... sequences of ``order``.

    Returns one row per (setting, seed, label).
    """
    rows = []
    for seed in seeds:
        spec.seed = seed
        images, truth = generate_phantom(spec)
        config = spec.label_config()
        indices = dimension_order(images.names, order)
        for n in range(1, len(indices) + 1):
            chosen = indices[:n]
            subset = images.subset(chosen)
            state = run_icm(subset, truth.atlas, config.subset(chosen), schedule,
                            workers=workers, seed=seed)
            segmentation = hard_segmentation(state.posteriors, config.labels)
            rows += evaluate_labels(segmentation.common, truth.labels, config.labels,
                                    setting=setting_name(n), images="+".join(subset.names),
                                    seed=seed)
    return pd.DataFrame(rows)


def cmd_dimensions(args: argparse.Namespace) -> int:
    spec = read_phantom_spec(args.spec) if args.spec else PhantomSpec()
    base = dimension_order([seq.name for seq in spec.sequences], args.order)[0]
    if args.base_std is not None:
        if not args.base_std >= 0:
            raise ConfigError("must be >= 0", key="--base-std")
        spec.sequences[base] = renoised(spec.sequences[base], args.base_std)
    if args.truncate_mm is not None:
        for i, seq in enumerate(spec.sequences):
            if i != base:
                seq.truncate_mm = args.truncate_mm
    schedule = Schedule.preset(args.preset)
    workers = args.workers or default_workers()
    seeds = [spec.seed + offset for offset in range(args.seeds)]
    out_dir = _prepare_output(Path(args.output)) if args.output else None

    banner("MvMM DIMENSION STUDY")
    frame = run_dimension_study(spec, seeds, schedule, args.order, workers)
    summary = aggregate_metrics(frame, ["setting", "label"])
    print(frame.to_string(index=False))
    print("\n" + summary.to_string(index=False))
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        write_table(out_dir / "dimensions.txt", frame)
        write_table(out_dir / "dimensions_summary.txt", summary)
    return EXIT_PARTIAL if _rows_failed(frame.to_dict("records")) else EXIT_OK


# ---------------------------------------------------------------- entry point

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mvmm", description="Joint multivariate mixture segmentation and registration.")
    parser.add_argument("--log-level", help="log level (default: $MVMM_LOG_LEVEL or INFO)")
    commands = parser.add_subparsers(dest="command", required=True)

    phantom = commands.add_parser("phantom", help="generate a synthetic phantom")
    phantom.add_argument("spec", nargs="?", help="phantom specification (default spec if omitted)")
    phantom.add_argument("-o", "--output", required=True, help="output directory")
    phantom.add_argument("--seed", type=int, help="override the specification seed")
    phantom.set_defaults(handler=cmd_phantom)

    segment = commands.add_parser("segment", help="run a segmentation from a config file")
    segment.add_argument("config", help="run configuration")
    segment.add_argument("-o", "--output", help="output directory (default: config [run] output)")
    segment.add_argument("--workers", type=int, help="worker threads (default: $MVMM_WORKERS)")
    segment.add_argument("--preset", choices=[p.value for p in SchedulePreset],
                         help="override the configured schedule preset")
    segment.set_defaults(handler=cmd_segment)

    evaluate = commands.add_parser("evaluate", help="Dice and contour distance per label")
    evaluate.add_argument("--seg", nargs="+", required=True, help="segmentation volumes")
    evaluate.add_argument("--truth", nargs="+", required=True,
                          help="truth volumes, paired with --seg in order")
    evaluate.add_argument("--labels", nargs="+", type=int, required=True, help="labels to score")
    evaluate.add_argument("-o", "--output", help="write the table (and a _summary table) here")
    evaluate.set_defaults(handler=cmd_evaluate)

    ablate = commands.add_parser("ablate", help="compare the four registration presets")
    ablate.add_argument("config", help="run configuration with a truth volume")
    ablate.add_argument("-o", "--output", help="output directory (default: config [run] output)")
    ablate.add_argument("--workers", type=int, help="worker threads (default: $MVMM_WORKERS)")
    ablate.set_defaults(handler=cmd_ablate)

    dimensions = commands.add_parser("dimensions", help="one, two and three sequence study")
    dimensions.add_argument("spec", nargs="?", help="phantom specification (default spec if omitted)")
    dimensions.add_argument("--seeds", type=int, default=1, help="number of consecutive seeds")
    dimensions.add_argument("--order", nargs="+", help="sequence names in the order they are added")
    dimensions.add_argument("--truncate-mm", type=float,
                            help="truncate every sequence but the first by this extent")
    dimensions.add_argument("--base-std", type=float,
                            help="noise stddev of every tissue in the first sequence")
    dimensions.add_argument("--preset", default=SchedulePreset.MVMM_MINUS.value,
                            choices=[p.value for p in SchedulePreset], help="schedule preset")
    dimensions.add_argument("--workers", type=int, help="worker threads (default: $MVMM_WORKERS)")
    dimensions.add_argument("-o", "--output", help="directory for the result tables")
    dimensions.set_defaults(handler=cmd_dimensions)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    load_dotenv()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        configure_logging(args.log_level)
        if getattr(args, "workers", None) is not None and args.workers < 1:
            raise ConfigError("must be >= 1", key="--workers")
        if getattr(args, "seeds", 1) < 1:
            raise ConfigError("must be >= 1", key="--seeds")
        return args.handler(args)
    except MvmmError as exc:
        print(f"❌ {args.command}: {exc}", file=sys.stderr)
        return getattr(exc, "exit_code", EXIT_VALIDATION)
    except OSError as exc:
        print(f"❌ {args.command}: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
