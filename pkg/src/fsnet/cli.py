"""Command-line entry point: ``fsnet gen-data | run | ablate | summarize | gradcheck``.

Settings are resolved as built-in defaults, then the ``--config`` JSON file,
then ``key=value`` overrides, then explicit flags (highest precedence).
"""

from __future__ import annotations

import json
import logging
import sys
from dataclasses import fields, replace
from pathlib import Path
from typing import Optional

import click
import numpy as np

from fsnet import gradcheck as gc
from fsnet.data import S_ABRUPT_BOUNDARIES, S_GRADUAL_BOUNDARIES, DataError, gen_ar1, gen_s_abrupt, gen_s_gradual, write_csv
from fsnet.harness import ABLATION_VARIANTS, ConfigError, ExperimentConfig, run_ablation, run_experiment

# Replacement backward functions for the gradcheck command, keyed by op name.
# Empty in normal use; tests install a corrupted backward here.
GRADCHECK_OVERRIDES: dict = {}

_FIELD_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}


def _parse_value(key: str, raw: str):
    if key in ("seeds", "feature_columns"):
        parts = [p for p in raw.split(",") if p]
        return [int(p) for p in parts] if key == "seeds" else parts
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def _parse_seeds(raw: str) -> tuple[int, ...]:
    """``"5"`` means five seeds 0..4; ``"3,7"`` lists them explicitly."""
    if "," in raw:
        return tuple(int(s) for s in raw.split(",") if s)
    return tuple(range(int(raw)))


def resolve_config(config_path: Optional[str], overrides: tuple[str, ...], flags: dict) -> ExperimentConfig:
    raw: dict = {}
    if config_path:
        path = Path(config_path)
        if not path.exists():
            raise click.UsageError(f"config file not found: {path}")
        raw.update(json.loads(path.read_text()))
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep:
            raise click.UsageError(f"override {item!r} is not of the form key=value")
        if key not in _FIELD_TYPES:
            raise click.UsageError(f"unknown config key: {key}")
        raw[key] = _parse_value(key, value)
    raw.update({k: v for k, v in flags.items() if v is not None})
    try:
        return ExperimentConfig.from_dict(raw)
    except (TypeError, ValueError) as exc:
        raise click.UsageError(str(exc)) from exc


def _checked(config: ExperimentConfig) -> ExperimentConfig:
    errors = config.validate()
    if errors:
        raise click.UsageError("\n".join(errors))
    return config


def _row(summary: dict) -> str:
    return (
        f"{summary['learner']:<12} H={summary['horizon']:<3} "
        f"MSE {summary['mse_mean']:.4f} ± {summary['mse_std']:.4f}  "
        f"MAE {summary['mae_mean']:.4f} ± {summary['mae_std']:.4f}"
    )


_common = [
    click.option("--config", "config_path", type=click.Path(dir_okay=False), help="JSON experiment config."),
    click.option("--seed", type=int, help="Run a single seed."),
    click.option("--seeds", help="Number of seeds (0..N-1) or a comma-separated list."),
    click.option("--data", help="s-abrupt, s-gradual, ar1, or a CSV / manifest path."),
    click.option("--horizon", type=int),
    click.option("--lookback", type=int),
    click.option("--out-dir", type=click.Path(file_okay=False)),
    click.option("--verbose", is_flag=True, default=None, help="Also write the per-step trigger event log."),
    click.option("--threads", type=int, help="Worker processes across seeds."),
    click.argument("overrides", nargs=-1),
]


def common_options(fn):
    for opt in reversed(_common):
        fn = opt(fn)
    return fn


def _flags(seed, seeds, **rest) -> dict:
    flags = dict(rest)
    if seed is not None:
        flags["seeds"] = (seed,)
    elif seeds is not None:
        flags["seeds"] = _parse_seeds(seeds)
    return flags


@click.group()
@click.option("--log-level", default="WARNING", show_default=True)
def main(log_level: str) -> None:
    """Online time-series forecasting experiments."""
    logging.basicConfig(level=log_level.upper(), format="%(levelname)s %(name)s: %(message)s")


@main.command("gen-data")
@click.argument("spec", type=click.Choice(["s-abrupt", "s-gradual", "ar1"]))
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--phi", type=float, default=0.5, show_default=True, help="AR coefficient (ar1 only).")
@click.option("--length", type=int, default=4000, show_default=True, help="Series length (ar1 only).")
@click.option("-o", "--out", type=click.Path(dir_okay=False), help="Output CSV (default: <spec>_seed<seed>.csv).")
def gen_data(spec: str, seed: int, phi: float, length: int, out: Optional[str]) -> None:
    """Write a synthetic series as a one-column CSV."""
    try:
        if spec == "s-abrupt":
            series, boundaries = gen_s_abrupt(seed), S_ABRUPT_BOUNDARIES
        elif spec == "s-gradual":
            series, boundaries = gen_s_gradual(seed), S_GRADUAL_BOUNDARIES
        else:
            series, boundaries = gen_ar1(phi, length, seed), []
    except DataError as exc:
        raise click.UsageError(str(exc)) from exc
    path = Path(out or f"{spec}_seed{seed}.csv")
    write_csv(path, series, ["value"])
    click.echo(f"wrote {path}: length={len(series)} boundaries={boundaries}")


@main.command()
@common_options
@click.option("--learner", help="onlinetcn, er, fsnet, nomemory, naive or largememory.")
def run(config_path, overrides, seed, seeds, **flags) -> None:
    """Run one learner over all seeds and print its table row."""
    config = _checked(resolve_config(config_path, overrides, _flags(seed, seeds, **flags)))
    try:
        summary = run_experiment(config)
    except (DataError, FloatingPointError) as exc:
        raise click.ClickException(str(exc)) from exc
    click.echo(_row(summary))


@main.command()
@common_options
def ablate(config_path, overrides, seed, seeds, **flags) -> None:
    """Compare the FSNet variants on identical data and seeds."""
    config = _checked(resolve_config(config_path, overrides, _flags(seed, seeds, **flags)))
    try:
        table = run_ablation(config)
    except (ConfigError, DataError, FloatingPointError) as exc:
        raise click.ClickException(str(exc)) from exc
    names = {"largememory": "LargeMemory", "fsnet": "Full", "nomemory": "NoMemory", "naive": "Naive"}
    click.echo(f"{config.data} H={config.horizon} seeds={list(config.seeds)}")
    click.echo(" " * 8 + "".join(f"{names[k]:>14}" for k in ABLATION_VARIANTS))
    for metric in ("mse", "mae"):
        cells = "".join(f"{table[k][metric + '_mean']:>14.4f}" for k in ABLATION_VARIANTS)
        click.echo(f"{metric.upper():<8}{cells}")


@main.command()
@click.argument("out_dir", type=click.Path(exists=True, file_okay=False))
def summarize(out_dir: str) -> None:
    """Print one row per summary file found in OUT_DIR."""
    paths = sorted(Path(out_dir).glob("*.summary.json"))
    if not paths:
        raise click.ClickException(f"no *.summary.json files in {out_dir}")
    for path in paths:
        click.echo(_row(json.loads(path.read_text())))


@main.command("gradcheck")
@click.option("--seed", type=int, default=0, show_default=True)
def gradcheck_cmd(seed: int) -> None:
    """Finite-difference check of every backward pass; exit 1 on any failure."""
    results = gc.run_suite(seed, GRADCHECK_OVERRIDES)
    for r in results:
        click.echo(f"{'PASS' if r.passed else 'FAIL'}  {r.op:<24} max rel error {r.max_rel_error:.3e}  ({r.worst})")
    failed = [r for r in results if not r.passed]
    if failed:
        worst = max(failed, key=lambda r: r.max_rel_error)
        click.echo(f"gradcheck failed: worst is {worst.op} parameter {worst.worst}", err=True)
        sys.exit(1)


if __name__ == "__main__":
    main()
