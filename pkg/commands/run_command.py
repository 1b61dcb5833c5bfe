from __future__ import annotations

import argparse
import csv
from dataclasses import replace
import logging
from pathlib import Path

from utils.config_utils import load_config, with_metrics_path
from utils.engine_utils import (
    SWEEP_VALUES,
    EngineConfig,
    RunResult,
    prepare_model,
    run,
    run_baseline_frozen,
    save_snapshot,
    sweep_config,
)
from utils.errors import ConfigError
from utils.model_utils import save_model
from utils.storage_utils import atomic_open


logger = logging.getLogger(__name__)

ABLATION_VARIANTS = ("agop", "static", "none", "agop-no-contrast", "frozen")


def config_from_args(args: argparse.Namespace) -> EngineConfig:
    overrides = {
        "engine.seed": getattr(args, "seed", None),
        "stream.repeat": getattr(args, "repeat", None),
        "engine.post_step_eval": True if getattr(args, "post_step_eval", False) else None,
        "model.checkpoint": getattr(args, "model", None),
    }
    return load_config(getattr(args, "config", None), overrides)


def print_summary(result: RunResult) -> None:
    print(f"mean_err={result.mean_error:.6f} final_align={result.final_alignment:.6f}")


def cmd_run(args: argparse.Namespace) -> int:
    config = with_metrics_path(config_from_args(args), args.out)
    prepared = prepare_model(config)
    if getattr(args, "save_model", None):
        save_model(args.save_model, prepared.backbone, prepared.head, prepared.prototypes)
        logger.info("Model written to %s", args.save_model)
    result = run(config, prepared)
    if getattr(args, "snapshot", None):
        save_snapshot(args.snapshot, result.state)
        logger.info("Snapshot written to %s", args.snapshot)
    print_summary(result)
    return 0


def cmd_baseline(args: argparse.Namespace) -> int:
    config = with_metrics_path(config_from_args(args), args.out)
    print_summary(run_baseline_frozen(config))
    return 0


def cmd_align(args: argparse.Namespace) -> int:
    """Alignment and spectral concentration at every basis refresh."""
    config = with_metrics_path(config_from_args(args), None)
    result = run(config)
    with atomic_open(args.out) as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["batch", "align", "kappa_r"])
        for entry in result.metrics:
            if entry.eig_refreshed:
                writer.writerow([entry.batch_index, repr(entry.alignment), repr(entry.kappa_r)])
    print_summary(result)
    return 0


def _variant_config(config: EngineConfig, variant: str) -> EngineConfig:
    if variant == "agop-no-contrast":
        return replace(config, subspace_mode="agop", loss=replace(config.loss, lambda_cont=0.0))
    if variant == "frozen":
        return config
    return replace(config, subspace_mode=variant)


def cmd_ablation(args: argparse.Namespace) -> int:
    config = with_metrics_path(config_from_args(args), None)
    prepared = prepare_model(config)
    rows = []
    for variant in ABLATION_VARIANTS:
        cfg = _variant_config(config, variant)
        result = run_baseline_frozen(cfg, prepared) if variant == "frozen" else run(cfg, prepared)
        rows.append((variant, result.mean_error, result.final_alignment))
        logger.info("Ablation %s: mean error %.4f", variant, result.mean_error)
    with atomic_open(Path(args.out)) as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["variant", "mean_err", "final_align"])
        for variant, err, align in rows:
            writer.writerow([variant, repr(err), repr(align)])
    for variant, err, align in rows:
        print(f"{variant:<18} mean_err={err:.6f} final_align={align:.6f}")
    return 0


def parse_values(raw: str | None, param: str) -> tuple[float, ...]:
    if not raw:
        return SWEEP_VALUES[param]
    try:
        return tuple(float(item) for item in raw.split(",") if item.strip())
    except ValueError as exc:
        raise ConfigError(f"--values must be comma-separated numbers, got {raw!r}") from exc


def cmd_sweep(args: argparse.Namespace) -> int:
    """One hyper-parameter varied over a single pretrained model."""
    config = with_metrics_path(config_from_args(args), None)
    values = parse_values(args.values, args.param)
    configs = [sweep_config(config, args.param, value) for value in values]
    prepared = prepare_model(config)
    rows = []
    for value, cfg in zip(values, configs):
        result = run(cfg, prepared)
        rows.append((value, result.mean_error, result.final_alignment))
        logger.info("Sweep %s=%g: mean error %.4f", args.param, value, result.mean_error)
    with atomic_open(Path(args.out)) as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["param", "value", "mean_err", "final_align"])
        for value, err, align in rows:
            writer.writerow([args.param, f"{value:g}", repr(err), repr(align)])
    for value, err, align in rows:
        print(f"{args.param}={value:<8g} mean_err={err:.6f} final_align={align:.6f}")
    return 0
