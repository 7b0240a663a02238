import numpy as np
import pytest
from scipy import stats

from fsnet.backbone import TcnConfig, backbone_forward
from fsnet.data import gen_ar1, make_windows
from fsnet.learners import FSNet, OnlineTCN, make_variant
from fsnet.mechanism import AdaptationCoefficients, FsnetHyperparams
from fsnet.optim import AdamW
from fsnet.replay import ReservoirBuffer

CFG = TcnConfig(input_dim=1, horizon=2, lookback=12, num_blocks=3, filters=6)


def stream(n=60, seed=0, phi=0.6):
    series = gen_ar1(phi, n + CFG.lookback + CFG.horizon - 1, seed)[:, None]
    return make_windows(series, CFG.lookback, CFG.horizon)


def assert_same_backbone(a, b, atol=0.0):
    pa, pb = a.model.named_parameters(), b.model.named_parameters()
    assert pa.keys() == pb.keys()
    for name in pa:
        np.testing.assert_allclose(pa[name], pb[name], atol=atol, rtol=0, err_msg=name)


def test_same_seed_gives_same_backbone_init():
    assert_same_backbone(OnlineTCN(CFG, 3), FSNet(CFG, 3))
    assert_same_backbone(OnlineTCN(CFG, 3), make_variant("er", CFG, 3))


def test_first_step_reduces_to_online_tcn():
    sample = stream(1)[0]
    base, fs = OnlineTCN(CFG, 1), FSNet(CFG, 1)
    r_base, r_fs = base.step(sample), fs.step(sample)
    np.testing.assert_allclose(r_fs.forecast, r_base.forecast, atol=1e-12, rtol=0)
    assert_same_backbone(base, fs, atol=1e-12)


def test_silent_adapter_without_memory_tracks_online_tcn():
    # A zeroed adapter has zero gradients everywhere, so it stays silent forever.
    base, fs = OnlineTCN(CFG, 2), FSNet(CFG, 2, variant="nomemory")
    for ad in fs.adapters:
        ad.w1[:] = 0.0
    for s in stream(40):
        assert base.step(s).forecast.tobytes() == fs.step(s).forecast.tobytes()
    assert_same_backbone(base, fs)


def test_adaptation_only_touches_later_layers():
    fs = FSNet(CFG, 0)
    x = stream(1)[0].lookback
    ident = [(AdaptationCoefficients.identity(6), AdaptationCoefficients.identity(6)) for _ in range(3)]
    _, ref = backbone_forward(x, fs.model, ident)
    moved = list(ident)
    moved[1] = (AdaptationCoefficients(np.full(6, 1.3), np.full(6, 0.7), np.full(6, 1.1)), ident[1][1])
    _, cache = backbone_forward(x, fs.model, moved)
    for l in (0, 1):
        np.testing.assert_array_equal(cache.blocks[l].x, ref.blocks[l].x)
    assert not np.array_equal(cache.blocks[2].x, ref.blocks[2].x)


def test_repeated_sample_does_not_trigger():
    s = stream(1)[0]
    fs = FSNet(CFG, 0)
    assert fs.step(s).triggers == [False] * 3
    assert fs.step(s).triggers == [False] * 3


def test_fsnet_is_deterministic():
    runs = []
    for _ in range(2):
        fs = FSNet(CFG, 7)
        runs.append([fs.step(s) for s in stream(50, seed=4)])
    for a, b in zip(*runs):
        assert a.forecast.tobytes() == b.forecast.tobytes() and a.loss == b.loss and a.triggers == b.triggers


def test_nomemory_never_touches_memory():
    fs = FSNet(CFG, 0, variant="nomemory")
    for s in stream(60, phi=-0.8):
        fs.step(s)
    assert all(not f.memory.any() for f in fs.fast)
    assert fs.trigger_counts == [0, 0, 0]


def test_naive_has_no_gradient_state():
    fs = FSNet(CFG, 0, variant="naive")
    assert all(f.g_hat is None and f.g_hat_prime is None for f in fs.fast)
    assert not fs.adapters
    before = [u.copy() for u in fs.naive_u]
    for s in stream(5):
        fs.step(s)
    assert any(not np.array_equal(a, b) for a, b in zip(before, fs.naive_u))


def test_tau_one_matches_nomemory():
    hp = FsnetHyperparams(tau=1.0)
    full, nomem = FSNet(CFG, 5, hp=hp), FSNet(CFG, 5, hp=hp, variant="nomemory")
    for s in stream(100, seed=2, phi=-0.5):
        a, b = full.step(s), nomem.step(s)
        assert a.forecast.tobytes() == b.forecast.tobytes()
    assert full.trigger_counts == [0, 0, 0]


def test_triggered_layer_writes_memory():
    fs = FSNet(CFG, 0, hp=FsnetHyperparams(tau=0.01))
    for s in stream(80, phi=-0.9):
        fs.step(s)
    assert sum(fs.trigger_counts) > 0
    assert any(f.memory.any() for f in fs.fast)
    for f in fs.fast:
        assert np.linalg.norm(f.memory, axis=1).max() <= 1 + 1e-9


def test_event_sink_records():
    events = []
    fs = FSNet(CFG, 0, event_sink=events.append)
    for s in stream(3):
        fs.step(s)
    assert len(events) == 9
    assert set(events[0]) == {"step", "layer", "cosine", "triggered", "read_rows", "attention_weights"}


def test_parameter_reports():
    full = FSNet(CFG, 0).parameter_report()
    assert set(full) == {"backbone", "adapter", "g_ema", "associative_memory"}
    assert set(FSNet(CFG, 0, variant="nomemory").parameter_report()) == {"backbone", "adapter", "g_ema"}
    assert set(make_variant("er", CFG).parameter_report()) == {"backbone", "episodic_memory"}
    assert make_variant("largememory", CFG).hp.memory_size == 128


def test_unknown_kind():
    with pytest.raises(ValueError, match="unknown learner"):
        make_variant("lstm", CFG)


def test_er_with_empty_buffer_equals_online_tcn():
    s = stream(1)[0]
    base, er = OnlineTCN(CFG, 1), make_variant("er", CFG, 1)
    assert base.step(s).forecast.tobytes() == er.step(s).forecast.tobytes()
    assert_same_backbone(base, er)


def test_er_without_replay_weight_equals_online_tcn():
    base, er = OnlineTCN(CFG, 1), make_variant("er", CFG, 1, lambda_er=0.0)
    for s in stream(30):
        base.step(s)
        er.step(s)
    assert_same_backbone(base, er)
    assert len(er.buffer) == 30


def test_er_replay_changes_updates():
    base, er = OnlineTCN(CFG, 1), make_variant("er", CFG, 1)
    for s in stream(5):
        base.step(s)
        er.step(s)
    assert not np.array_equal(base.model.regressor.weight, er.model.regressor.weight)


def test_reservoir_capacity_and_prefix():
    buf = ReservoirBuffer(5, np.random.default_rng(0))
    for i in range(5):
        buf.add(i)
    assert buf.items == [0, 1, 2, 3, 4]
    for i in range(5, 200):
        buf.add(i)
        assert len(buf) == 5
    assert len(set(buf.sample(10))) == 5


def test_reservoir_is_uniform():
    buf = ReservoirBuffer(500, np.random.default_rng(123))
    for i in range(10_000):
        buf.add(i)
    counts = np.bincount(np.array(buf.items) // 1000, minlength=10)
    assert stats.chisquare(counts).pvalue > 0.01


def test_adamw_examples():
    p = {"x": np.array([1.0])}
    AdamW(lr=0.1).step(p, {"x": np.array([0.0])})
    assert p["x"][0] == 1.0
    AdamW(lr=0.1).step(p, {"x": np.array([1.0])})
    assert p["x"][0] == pytest.approx(0.9, abs=1e-7)
    decayed = {"x": np.array([2.0])}
    AdamW(lr=0.1, weight_decay=0.5).step(decayed, {"x": np.array([0.0])})
    assert decayed["x"][0] == pytest.approx(2.0 * 0.95)


def test_adamw_descends_a_parabola():
    p = {"x": np.array([1.0])}
    opt = AdamW(lr=0.05)
    values = [1.0]
    for _ in range(10):
        opt.step(p, {"x": 2 * p["x"]})
        values.append(abs(p["x"][0]))
    assert all(b < a for a, b in zip(values, values[1:]))


def test_adamw_rejects_mismatches():
    opt = AdamW()
    with pytest.raises(KeyError):
        opt.step({"x": np.zeros(2)}, {})
    with pytest.raises(ValueError):
        opt.step({"x": np.zeros(2)}, {"x": np.zeros(3)})
