import json
import statistics

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fsnet.backbone import TcnConfig
from fsnet.data import gen_ar1, make_windows, split_and_normalize
from fsnet.harness import (
    ConfigError,
    ExperimentConfig,
    RunMetrics,
    aggregate,
    online_run,
    run_experiment,
    run_seed,
    warmup_train,
)
from fsnet.learners import OnlineTCN, StepReport
from fsnet.tensor_ops import NonFiniteError

TINY = dict(data="ar1", ar_length=400, lookback=12, num_blocks=2, filters=4)


class Constant:
    def __init__(self, value=0.0):
        self.value = value
        self.seen = []

    def step(self, sample):
        self.seen.append(sample.index)
        return StepReport(0.0, np.full_like(sample.target, self.value))


class Memorizer:
    """Forecasts the target of the previous step, then stores the current one."""

    def __init__(self):
        self.last = None

    def step(self, sample):
        forecast = np.zeros_like(sample.target) if self.last is None else self.last
        self.last = sample.target.copy()
        return StepReport(0.0, forecast)


class Oracle:
    def step(self, sample):
        return StepReport(0.0, sample.target.copy())


class Exploding:
    def __init__(self, at):
        self.at, self.t = at, 0

    def step(self, sample):
        if self.t == self.at:
            raise NonFiniteError("loss is nan")
        self.t += 1
        return StepReport(0.0, np.zeros_like(sample.target))


def windows(n=200, seed=0, phi=0.5, E=12, H=1):
    return make_windows(gen_ar1(phi, n + E + H - 1, seed)[:, None], E, H)


@given(st.lists(st.floats(0, 100), min_size=1, max_size=50))
def test_running_mean_matches_batch_mean(values):
    m = RunMetrics()
    for v in values:
        m.update(v, v / 2)
    assert m.cum_mse == pytest.approx(statistics.fmean(values), rel=1e-9, abs=1e-9)
    assert m.steps == len(values)


def test_perfect_predictor_scores_zero():
    m = online_run(Oracle(), windows())
    assert m.cum_mse == 0.0 and m.cum_mae == 0.0


def test_zero_predictor_scores_variance_on_normalized_data():
    series = gen_ar1(0.5, 16_000, 3)[:, None]
    _, online, _ = split_and_normalize(series, 0.25)
    m = online_run(Constant(), make_windows(online, 12, 1))
    assert m.cum_mse == pytest.approx(1.0, abs=0.1)


def test_evaluation_precedes_training():
    samples = windows(50)
    m = online_run(Memorizer(), samples)
    assert m.cum_mse > 0.1
    # the error at step t is against the forecast made before seeing step t
    first = float(np.mean(samples[0].target ** 2))
    assert m.step_losses[0] == pytest.approx(first)


def test_metric_files(tmp_path):
    samples = windows(20)
    online_run(Constant(1.0), samples, tmp_path / "m.jsonl", tmp_path / "c.tsv")
    lines = [json.loads(x) for x in (tmp_path / "m.jsonl").read_text().splitlines()]
    assert [x["step"] for x in lines] == list(range(20))
    assert set(lines[0]) == {"step", "mse", "mae", "cum_mse", "cum_mae"}
    curve = (tmp_path / "c.tsv").read_text().splitlines()
    assert curve[0] == "step\tcum_mse" and len(curve) == 21
    assert float(curve[-1].split("\t")[1]) == pytest.approx(lines[-1]["cum_mse"])


def test_divergence_flushes_partial_files(tmp_path):
    with pytest.raises(NonFiniteError):
        online_run(Exploding(7), windows(20), tmp_path / "m.jsonl", tmp_path / "c.tsv")
    assert len((tmp_path / "m.jsonl").read_text().splitlines()) == 7


def test_steps_visit_samples_in_order():
    learner = Constant()
    online_run(learner, windows(30))
    assert learner.seen == list(range(30))


def test_empty_warmup_changes_nothing():
    cfg = TcnConfig(1, 1, 12, 2, 4)
    learner = OnlineTCN(cfg, 0)
    before = learner.snapshot()
    warmup_train(learner, [])
    after = learner.snapshot()
    assert all(np.array_equal(before[k], after[k]) for k in before)


def test_warmup_is_order_sensitive():
    cfg = TcnConfig(1, 1, 12, 2, 4)
    samples = windows(40)
    a = warmup_train(OnlineTCN(cfg, 0), samples)
    b = warmup_train(OnlineTCN(cfg, 0), samples[::-1])
    assert not np.array_equal(a.model.regressor.weight, b.model.regressor.weight)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_warmup_reduces_loss(seed):
    cfg = TcnConfig(1, 1, 12, 2, 8)
    series = gen_ar1(0.6, 1200, seed)[:, None]
    warm, _, _ = split_and_normalize(series, 0.9)
    samples = make_windows(warm, 12, 1)
    learner = OnlineTCN(cfg, seed, lr=3e-3)
    tail = samples[-100:]

    def tail_loss():
        return np.mean([np.mean((learner.predict(s.lookback) - s.target) ** 2) for s in tail])

    start = tail_loss()
    warmup_train(learner, samples)
    assert tail_loss() < start


def test_config_validation_reports_everything(tmp_path):
    cfg = ExperimentConfig(data=str(tmp_path / "missing.csv"), learner="lstm", horizon=0, tau=1.5, phi=2.0)
    errors = cfg.validate()
    assert len(errors) == 5
    text = "\n".join(errors)
    for needle in ("missing.csv", "lstm", "horizon", "tau", "|phi| < 1"):
        assert needle in text
    with pytest.raises(ConfigError) as info:
        run_experiment(cfg)
    assert info.value.errors == errors
    assert ExperimentConfig().validate() == []


def test_config_from_dict():
    cfg = ExperimentConfig.from_dict({"seeds": [1, 2], "horizon": 24})
    assert cfg.seeds == (1, 2) and cfg.horizon == 24
    with pytest.raises(ValueError, match="colour"):
        ExperimentConfig.from_dict({"colour": "red"})
    assert cfg.hash() == ExperimentConfig.from_dict({"seeds": [1, 2], "horizon": 24, "verbose": True}).hash()
    assert cfg.hash() != ExperimentConfig(seeds=(1, 2)).hash()


def test_aggregate_uses_sample_std():
    mean, std = aggregate([1.0, 2.0, 4.0])
    assert mean == pytest.approx(7 / 3)
    assert std == pytest.approx(np.std([1.0, 2.0, 4.0], ddof=1))
    assert aggregate([3.0]) == (3.0, 0.0)


@pytest.mark.parametrize("learner", ["fsnet", "er"])
def test_repeated_runs_write_identical_files(tmp_path, learner):
    for name in ("a", "b"):
        run_seed(ExperimentConfig(learner=learner, out_dir=str(tmp_path / name), verbose=True, **TINY), 4)
    files = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert f"{learner}_H1_seed4.metrics.jsonl" in files
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes(), f


def test_experiment_summary(tmp_path):
    cfg = ExperimentConfig(learner="fsnet", seeds=(0, 1), out_dir=str(tmp_path), **TINY)
    summary = run_experiment(cfg)
    per_seed = [r["cum_mse"] for r in summary["per_seed"]]
    assert summary["mse_mean"] == pytest.approx(np.mean(per_seed))
    assert summary["mse_std"] == pytest.approx(np.std(per_seed, ddof=1))
    assert set(summary["parameters"]) == {"backbone", "adapter", "g_ema", "associative_memory"}
    saved = json.loads((tmp_path / "fsnet_H1.summary.json").read_text())
    assert saved["config_hash"] == cfg.hash()


def test_parallel_seeds_match_serial(tmp_path):
    serial = run_experiment(ExperimentConfig(learner="onlinetcn", seeds=(0, 1), **TINY))
    parallel = run_experiment(ExperimentConfig(learner="onlinetcn", seeds=(0, 1), threads=2, **TINY))
    assert [r["cum_mse"] for r in serial["per_seed"]] == [r["cum_mse"] for r in parallel["per_seed"]]
