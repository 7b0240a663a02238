"""Online protocol: warm-up, predict-then-train rounds, metric files, multi-seed experiments."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import statistics
import tempfile
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from fsnet.backbone import TcnConfig
from fsnet.data import (
    DatasetManifest,
    as_matrix,
    gen_ar1,
    gen_s_abrupt,
    gen_s_gradual,
    load_csv,
    make_windows,
    split_and_normalize,
)
from fsnet.learners import LEARNER_KINDS, make_variant
from fsnet.mechanism import FsnetHyperparams
from fsnet.tensor_ops import NonFiniteError

log = logging.getLogger(__name__)

SYNTHETIC = ("s-abrupt", "s-gradual", "ar1")


@dataclass
class RunMetrics:
    cum_mse: float = 0.0
    cum_mae: float = 0.0
    steps: int = 0
    step_losses: list[float] = field(default_factory=list)
    trigger_counts: list[int] = field(default_factory=list)

    def update(self, mse: float, mae: float) -> None:
        self.steps += 1
        self.cum_mse += (mse - self.cum_mse) / self.steps
        self.cum_mae += (mae - self.cum_mae) / self.steps
        self.step_losses.append(mse)


def warmup_train(learner, samples: Iterable, epochs: int = 1):
    """Sequential single-sample training; FSNet state evolves exactly as in the online phase."""
    return learner.warmup_train(samples, epochs)


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    with os.fdopen(fd, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def online_run(
    learner,
    samples: Sequence,
    metrics_path: Optional[Path] = None,
    curve_path: Optional[Path] = None,
) -> RunMetrics:
    """Forecast each sample with the current model, score it, then train on it.

    On divergence the files are flushed up to the failing step and the
    error is re-raised.
    """
    metrics = RunMetrics()
    lines, curve = [], []
    try:
        for t, sample in enumerate(samples):
            report = learner.step(sample)
            err = report.forecast - sample.target
            mse, mae = float(np.mean(err * err)), float(np.mean(np.abs(err)))
            metrics.update(mse, mae)
            lines.append(
                json.dumps({"step": t, "mse": mse, "mae": mae, "cum_mse": metrics.cum_mse, "cum_mae": metrics.cum_mae})
            )
            curve.append(f"{t}\t{metrics.cum_mse!r}")
    finally:
        metrics.trigger_counts = list(getattr(learner, "trigger_counts", []))
        if metrics_path is not None:
            _atomic_write(Path(metrics_path), "".join(s + "\n" for s in lines))
        if curve_path is not None:
            _atomic_write(Path(curve_path), "step\tcum_mse\n" + "".join(s + "\n" for s in curve))
    return metrics


@dataclass(frozen=True)
class ExperimentConfig:
    data: str = "s-abrupt"  # s-abrupt | s-gradual | ar1 | path to CSV or manifest (.json)
    learner: str = "fsnet"
    horizon: int = 1
    lookback: int = 60
    seeds: tuple[int, ...] = (0,)
    phi: float = 0.5
    ar_length: int = 4000
    feature_columns: tuple[str, ...] = ()
    warmup_ratio: float = 0.25
    num_blocks: int = 10
    filters: int = 64
    kernel_size: int = 3
    lr: float = 1e-3
    weight_decay: float = 0.0
    gamma: float = 0.9
    gamma_prime: float = 0.3
    tau: float = 0.75
    top_k: int = 2
    memory_size: int = 32
    adapter_hidden: int = 32
    er_capacity: int = 500
    er_batch: int = 8
    lambda_er: float = 0.2
    out_dir: Optional[str] = None
    verbose: bool = False
    threads: int = 1

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ValueError(f"unknown config key(s): {', '.join(unknown)}")
        raw = dict(raw)
        for key in ("seeds", "feature_columns"):
            if key in raw and not isinstance(raw[key], (list, tuple)):
                raw[key] = (raw[key],)
            if key in raw:
                raw[key] = tuple(raw[key])
        return cls(**raw)

    def validate(self) -> list[str]:
        """Every problem with the config, so they can all be reported at once."""
        errors = []
        is_file = self.data not in SYNTHETIC
        if is_file and not Path(self.data).exists():
            errors.append(f"data file not found: {self.data}")
        if self.learner not in LEARNER_KINDS:
            errors.append(f"learner must be one of {', '.join(LEARNER_KINDS)}, got {self.learner!r}")
        for name in ("horizon", "lookback", "num_blocks", "filters", "kernel_size", "top_k", "memory_size",
                     "adapter_hidden", "er_capacity", "threads", "ar_length"):
            if getattr(self, name) < 1:
                errors.append(f"{name} must be >= 1, got {getattr(self, name)}")
        if not self.seeds:
            errors.append("at least one seed is required")
        if self.er_batch < 0:
            errors.append(f"er_batch must be >= 0, got {self.er_batch}")
        if not abs(self.phi) < 1:
            errors.append(f"coefficient must satisfy |phi| < 1, got phi={self.phi}")
        if not 0 <= self.warmup_ratio < 1:
            errors.append(f"warmup_ratio must lie in [0, 1), got {self.warmup_ratio}")
        if self.lr <= 0:
            errors.append(f"lr must be > 0, got {self.lr}")
        if self.lambda_er < 0:
            errors.append(f"lambda_er must be >= 0, got {self.lambda_er}")
        if self.top_k > self.memory_size:
            errors.append(f"top_k ({self.top_k}) must not exceed memory_size ({self.memory_size})")
        if not 0 < self.gamma_prime < self.gamma < 1:
            errors.append(f"need 0 < gamma_prime < gamma < 1, got gamma={self.gamma}, gamma_prime={self.gamma_prime}")
        if not 0 < self.tau <= 1:
            errors.append(f"tau must lie in (0, 1], got {self.tau}")
        return errors

    def hash(self) -> str:
        payload = {k: v for k, v in asdict(self).items() if k not in ("out_dir", "verbose", "threads")}
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]

    def hyperparams(self) -> FsnetHyperparams:
        return FsnetHyperparams(self.gamma, self.gamma_prime, self.tau, self.top_k, self.memory_size, self.adapter_hidden)


class ConfigError(ValueError):
    def __init__(self, errors: list[str]):
        super().__init__("invalid experiment config:\n  " + "\n  ".join(errors))
        self.errors = errors


def load_series(config: ExperimentConfig, seed: int) -> np.ndarray:
    if config.data == "s-abrupt":
        return as_matrix(gen_s_abrupt(seed))
    if config.data == "s-gradual":
        return as_matrix(gen_s_gradual(seed))
    if config.data == "ar1":
        return as_matrix(gen_ar1(config.phi, config.ar_length, seed))
    if config.data.endswith(".json"):
        return DatasetManifest.load(config.data).read()
    return load_csv(config.data, config.feature_columns or None)


def build_learner(config: ExperimentConfig, input_dim: int, seed: int, event_sink=None):
    tcn = TcnConfig(input_dim, config.horizon, config.lookback, config.num_blocks, config.filters, config.kernel_size)
    kwargs = {"weight_decay": config.weight_decay}
    if config.learner == "er":
        kwargs.update(capacity=config.er_capacity, replay_batch=config.er_batch, lambda_er=config.lambda_er)
        return make_variant("er", tcn, seed, config.lr, **kwargs)
    return make_variant(config.learner, tcn, seed, config.lr, hp=config.hyperparams(), event_sink=event_sink, **kwargs)


def _cell_stem(config: ExperimentConfig, seed: int) -> str:
    return f"{config.learner}_H{config.horizon}_seed{seed}"


def run_seed(config: ExperimentConfig, seed: int) -> dict:
    """One (config, seed) cell: data, 25:75 split, warm-up, online phase."""
    started = time.perf_counter()
    series = load_series(config, seed)
    warm, online, _ = split_and_normalize(series, config.warmup_ratio, config.lookback + config.horizon)
    events: list[str] = []
    sink = (lambda rec: events.append(json.dumps(rec))) if config.verbose else None
    learner = build_learner(config, series.shape[1], seed, sink)

    out = Path(config.out_dir) if config.out_dir else None
    stem = _cell_stem(config, seed)
    warmup_train(learner, make_windows(warm, config.lookback, config.horizon))
    try:
        metrics = online_run(
            learner,
            make_windows(online, config.lookback, config.horizon),
            None if out is None else out / f"{stem}.metrics.jsonl",
            None if out is None else out / f"{stem}.curve.tsv",
        )
    finally:
        if out is not None and config.verbose:
            _atomic_write(out / f"{stem}.triggers.jsonl", "".join(e + "\n" for e in events))
    log.info("%s: cum_mse=%.4f cum_mae=%.4f (%d steps)", stem, metrics.cum_mse, metrics.cum_mae, metrics.steps)
    return {
        "seed": seed,
        "cum_mse": metrics.cum_mse,
        "cum_mae": metrics.cum_mae,
        "steps": metrics.steps,
        "trigger_counts": metrics.trigger_counts,
        "parameters": learner.parameter_report(),
        "wall_time": time.perf_counter() - started,
    }


def aggregate(values: Sequence[float]) -> tuple[float, float]:
    """Mean and sample standard deviation (0 for a single value)."""
    mean = statistics.fmean(values)
    return mean, statistics.stdev(values) if len(values) > 1 else 0.0


def run_experiment(config: ExperimentConfig) -> dict:
    errors = config.validate()
    if errors:
        raise ConfigError(errors)
    started = time.perf_counter()
    if config.threads > 1 and len(config.seeds) > 1:
        with ProcessPoolExecutor(max_workers=config.threads) as pool:
            per_seed = list(pool.map(run_seed, [config] * len(config.seeds), config.seeds))
    else:
        per_seed = [run_seed(config, s) for s in config.seeds]

    mse_mean, mse_std = aggregate([r["cum_mse"] for r in per_seed])
    mae_mean, mae_std = aggregate([r["cum_mae"] for r in per_seed])
    summary = {
        "config_hash": config.hash(),
        "config": {k: v for k, v in asdict(config).items() if k not in ("out_dir", "verbose", "threads")},
        "learner": config.learner,
        "horizon": config.horizon,
        "per_seed": per_seed,
        "mse_mean": mse_mean,
        "mse_std": mse_std,
        "mae_mean": mae_mean,
        "mae_std": mae_std,
        "parameters": per_seed[0]["parameters"],
        "wall_time": time.perf_counter() - started,
    }
    if config.out_dir:
        name = f"{config.learner}_H{config.horizon}.summary.json"
        _atomic_write(Path(config.out_dir) / name, json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary


ABLATION_VARIANTS = ("largememory", "fsnet", "nomemory", "naive")


def run_ablation(config: ExperimentConfig) -> dict[str, dict]:
    """Table of the FSNet variants on identical data and seeds."""
    return {kind: run_experiment(replace(config, learner=kind)) for kind in ABLATION_VARIANTS}
