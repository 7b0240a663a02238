"""Synthetic drifting streams, CSV ingestion, warm-up normalization and windowing."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional, Sequence, Union

import numpy as np

STD_FLOOR = 1e-8

Seed = Union[int, np.random.Generator]

# (phi, start, end) of each AR task; tasks are 1000 points long.
S_ABRUPT_TASKS = [(0.1, 0, 1000), (0.4, 1000, 2000), (0.6, 2000, 3000), (0.1, 3000, 4000), (0.4, 4000, 5000), (0.6, 5000, 6000)]
# In the gradual stream each task overlaps the next one for 200 points; the
# overlap is the plain average of both processes.
S_GRADUAL_TASKS = [(0.1, 0, 1000), (0.4, 800, 1800), (0.6, 1600, 2600), (0.1, 2400, 3400), (0.4, 3200, 4200), (0.6, 4000, 5000)]
S_ABRUPT_BOUNDARIES = [1000, 2000, 3000, 4000, 5000]
S_GRADUAL_BOUNDARIES = [800, 1000, 1600, 1800, 2400, 2600, 3200, 3400, 4000, 4200, 5000]


class DataError(ValueError):
    pass


def _rng(seed: Seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


@dataclass(frozen=True)
class ArCoefficient:
    phi: float
    noise_sigma: float = 1.0

    def __post_init__(self):
        if not abs(self.phi) < 1:
            raise DataError(f"AR coefficient must satisfy |phi| < 1, got phi={self.phi}")
        if not self.noise_sigma > 0:
            raise DataError(f"noise_sigma must be > 0, got {self.noise_sigma}")

    @property
    def stationary_variance(self) -> float:
        return self.noise_sigma**2 / (1.0 - self.phi**2)


def gen_ar1(phi: float, length: int, seed: Seed, noise_sigma: float = 1.0) -> np.ndarray:
    """AR(1) path started from its stationary distribution."""
    coef = ArCoefficient(phi, noise_sigma)
    if length < 1:
        raise DataError(f"length must be >= 1, got {length}")
    rng = _rng(seed)
    x = np.empty(length)
    x[0] = rng.normal(0.0, math.sqrt(coef.stationary_variance))
    noise = rng.normal(0.0, noise_sigma, size=length)
    for t in range(1, length):
        x[t] = phi * x[t - 1] + noise[t]
    return x


def gen_s_abrupt(seed: Seed) -> np.ndarray:
    """6000 points: six independent AR(1) tasks switching abruptly every 1000 points."""
    rng = _rng(seed)
    return np.concatenate([gen_ar1(phi, end - start, rng) for phi, start, end in S_ABRUPT_TASKS])


def gen_s_gradual(seed: Seed) -> np.ndarray:
    """5000 points: each task's last 200 points average it with the next task's process."""
    rng = _rng(seed)
    total = S_GRADUAL_TASKS[-1][2]
    acc = np.zeros(total)
    count = np.zeros(total)
    for phi, start, end in S_GRADUAL_TASKS:
        acc[start:end] += gen_ar1(phi, end - start, rng)
        count[start:end] += 1
    return acc / count


def segment_of(t: int, boundaries: Sequence[int]) -> int:
    return int(np.searchsorted(boundaries, t, side="right"))


def load_csv(path: Union[str, Path], feature_columns: Optional[Sequence[str]] = None) -> np.ndarray:
    """Read numeric columns into a ``[T, n]`` array, keeping the requested column order."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"data file not found: {path}")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        columns = list(feature_columns) if feature_columns else header
        unknown = [c for c in columns if c not in header]
        if unknown:
            raise DataError(f"{path}: unknown column(s) {unknown}; header is {header}")
        idx = [header.index(c) for c in columns]
        rows = []
        for row_no, row in enumerate(reader, start=1):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(f"{path}: line {reader.line_num} (row {row_no}) has {len(row)} fields, expected {len(header)}")
            values = []
            for j, col in zip(idx, columns):
                cell = row[j].strip()
                try:
                    v = float(cell)
                except ValueError:
                    v = math.nan
                if not math.isfinite(v):
                    raise DataError(f"{path}: line {reader.line_num}: row {row_no}, column {col!r}: invalid value {cell!r}")
                values.append(v)
            rows.append(values)
    if not rows:
        raise DataError(f"{path}: no data rows")
    return np.asarray(rows, dtype=np.float64)


def write_csv(path: Union[str, Path], series: np.ndarray, columns: Sequence[str]) -> None:
    series = np.asarray(series, dtype=np.float64)
    if series.ndim == 1:
        series = series[:, None]
    if series.shape[1] != len(columns):
        raise DataError(f"{len(columns)} column names for {series.shape[1]} columns")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in series:
            w.writerow([repr(float(v)) for v in row])


@dataclass(frozen=True)
class NormStats:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, series: np.ndarray) -> "NormStats":
        if len(series) == 0:
            n = series.shape[1]
            return cls(np.zeros(n), np.ones(n))
        return cls(series.mean(axis=0), np.maximum(series.std(axis=0), STD_FLOOR))

    def normalize(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) / self.std

    def denormalize(self, z: np.ndarray) -> np.ndarray:
        return z * self.std + self.mean


def as_matrix(series: np.ndarray) -> np.ndarray:
    series = np.asarray(series, dtype=np.float64)
    return series[:, None] if series.ndim == 1 else series


def split_and_normalize(
    series: np.ndarray, warmup_ratio: float = 0.25, min_length: int = 1
) -> tuple[np.ndarray, np.ndarray, NormStats]:
    """Split by time into warm-up and online parts, normalizing both with warm-up statistics.

    ``min_length`` is the number of points each non-empty part needs to yield
    one sample (look-back plus horizon).
    """
    series = as_matrix(series)
    if not 0 <= warmup_ratio < 1:
        raise DataError(f"warmup_ratio must lie in [0, 1), got {warmup_ratio}")
    cut = int(round(len(series) * warmup_ratio))
    warm, online = series[:cut], series[cut:]
    if len(online) < min_length or (cut and cut < min_length):
        raise DataError(
            f"series of length {len(series)} too short: warm-up {len(warm)} and online {len(online)} points, "
            f"each phase needs at least {min_length}"
        )
    stats = NormStats.fit(warm)
    return stats.normalize(warm), stats.normalize(online), stats


@dataclass(frozen=True)
class StreamSample:
    lookback: np.ndarray  # [n, E]
    target: np.ndarray  # [H, n]
    index: int


def num_windows(length: int, lookback: int, horizon: int) -> int:
    return max(0, length - lookback - horizon + 1)


def window_iter(series: np.ndarray, lookback: int = 60, horizon: int = 1) -> Iterator[StreamSample]:
    """Stride-1 windows: sample i reads points [i, i+E) and predicts [i+E, i+E+H)."""
    series = as_matrix(series)
    if len(series) < lookback + horizon:
        raise DataError(f"series of length {len(series)} shorter than lookback + horizon = {lookback + horizon}")
    for i in range(num_windows(len(series), lookback, horizon)):
        yield StreamSample(
            np.ascontiguousarray(series[i : i + lookback].T), series[i + lookback : i + lookback + horizon].copy(), i
        )


def make_windows(series: np.ndarray, lookback: int, horizon: int) -> list[StreamSample]:
    if len(as_matrix(series)) == 0:
        return []
    return list(window_iter(series, lookback, horizon))


@dataclass(frozen=True)
class DatasetManifest:
    """Describes a CSV dataset: which columns to model and the windowing protocol."""

    path: str
    feature_columns: tuple[str, ...] = ()
    lookback: int = 60
    horizon: int = 1
    warmup_ratio: float = 0.25
    seed: int = 0

    @classmethod
    def load(cls, path: Union[str, Path]) -> "DatasetManifest":
        path = Path(path)
        raw = json.loads(path.read_text())
        unknown = set(raw) - set(cls.__dataclass_fields__)
        if unknown:
            raise DataError(f"{path}: unknown manifest key(s) {sorted(unknown)}")
        if "path" not in raw:
            raise DataError(f"{path}: manifest needs a 'path' entry")
        data_path = Path(raw["path"])
        if not data_path.is_absolute():
            raw["path"] = str(path.parent / data_path)
        raw["feature_columns"] = tuple(raw.get("feature_columns", ()))
        return cls(**raw)

    def read(self) -> np.ndarray:
        return load_csv(self.path, self.feature_columns or None)
