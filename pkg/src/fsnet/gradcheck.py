"""Central finite-difference checks for every backward pass."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from fsnet import backbone as bb
from fsnet import mechanism as mech
from fsnet import tensor_ops as ops

FD_STEP = 1e-5


@dataclass
class CheckResult:
    op: str
    max_rel_error: float
    worst: str  # name of the input/parameter with the largest error
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def numeric_gradient(f: Callable[[], float], x: np.ndarray, step: float = FD_STEP) -> np.ndarray:
    """d f / d x by central differences, perturbing ``x`` in place."""
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = f()
        flat[i] = orig - step
        lo = f()
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * step)
    return grad


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
    return float(np.linalg.norm(analytic - numeric) / scale)


def _compare(op: str, analytic: dict, inputs: dict, f, tol: float) -> CheckResult:
    worst, worst_err = "", 0.0
    for name, x in inputs.items():
        err = rel_error(analytic[name], numeric_gradient(f, x))
        if err >= worst_err:
            worst, worst_err = name, err
    return CheckResult(op, worst_err, worst, tol)


def check_conv(rng, backward=ops.dilated_causal_conv1d_backward, tol=1e-6) -> CheckResult:
    x = rng.normal(size=(2, 5))
    p = ops.ConvParams(rng.normal(size=(2, 2, 3)), rng.normal(size=2), dilation=2)
    g = rng.normal(size=(2, 5))

    def f():
        return float((ops.dilated_causal_conv1d(x, p) * g).sum())

    gx, gw, gb = backward(g, x, p)
    return _compare("dilated_causal_conv1d", {"input": gx, "weight": gw, "bias": gb},
                    {"input": x, "weight": p.weight, "bias": p.bias}, f, tol)


def check_linear(rng, backward=ops.linear_backward, tol=1e-6) -> CheckResult:
    x = rng.normal(size=4)
    p = ops.LinearParams(rng.normal(size=(3, 4)), rng.normal(size=3))
    g = rng.normal(size=3)

    def f():
        return float(ops.linear_forward(x, p) @ g)

    gx, gw, gb = backward(g, x, p)
    return _compare("linear", {"input": gx, "weight": gw, "bias": gb},
                    {"input": x, "weight": p.weight, "bias": p.bias}, f, tol)


def check_relu(rng, backward=ops.relu_backward, tol=1e-6) -> CheckResult:
    # Keep inputs away from the kink so central differences are exact.
    x = rng.uniform(0.1, 1.0, size=12) * rng.choice([-1.0, 1.0], size=12)
    g = rng.normal(size=12)

    def f():
        return float(ops.relu_forward(x) @ g)

    return _compare("relu", {"input": backward(g, x)}, {"input": x}, f, tol)


def check_mul(rng, backward=ops.elementwise_mul_backward, tol=1e-6) -> CheckResult:
    a, b, g = rng.normal(size=(3, 8))

    def f():
        return float(ops.elementwise_mul_forward(a, b) @ g)

    ga, gb = backward(g, a, b)
    return _compare("elementwise_mul", {"a": ga, "b": gb}, {"a": a, "b": b}, f, tol)


def check_adapt_layer(rng, backward=mech.adapt_layer_backward, tol=1e-6) -> CheckResult:
    x = rng.normal(size=(2, 5))
    p = ops.ConvParams(rng.normal(size=(2, 2, 2)), rng.normal(size=2), dilation=1)
    u = rng.uniform(0.5, 1.5, size=6)
    g = rng.normal(size=(2, 5))

    def f():
        out, _, _ = mech.adapt_layer(p, x, mech.AdaptationCoefficients.from_vector(u))
        return float((out * g).sum())

    coeffs = mech.AdaptationCoefficients.from_vector(u)
    _, tilde, raw = mech.adapt_layer(p, x, coeffs)
    gx, gw, gb, gu = backward(g, x, p, tilde, raw, coeffs)
    return _compare("adapt_layer", {"input": gx, "weight": gw, "bias": gb, "coefficients": gu},
                    {"input": x, "weight": p.weight, "bias": p.bias, "coefficients": u}, f, tol)


def check_adapter(rng, backward=mech.adapter_backward, tol=1e-6) -> CheckResult:
    g_hat = rng.normal(size=10)
    params = mech.AdapterParams(rng.normal(size=(3, 3)), rng.normal(size=(1, 3)), d=4)
    gd = rng.normal(size=4)

    def f():
        return float(mech.adapter_forward(g_hat, params)[0] @ gd)

    _, cache = mech.adapter_forward(g_hat, params)
    gw1, gw2 = backward(gd, cache, params)
    return _compare("adapter", {"w1": gw1, "w2": gw2}, {"w1": params.w1, "w2": params.w2}, f, tol)


def check_mse(rng, loss_fn=bb.mse_loss, tol=1e-6) -> CheckResult:
    y_hat, y = rng.normal(size=(2, 3, 2))

    def f():
        return loss_fn(y_hat, y)[0]

    return _compare("mse_loss", {"prediction": loss_fn(y_hat, y)[1]}, {"prediction": y_hat}, f, tol)


def small_network(rng, num_blocks: int = 2, adapted: bool = True):
    """A tiny TCN with random (nonzero) biases and optional random modulation."""
    cfg = bb.TcnConfig(input_dim=2, horizon=2, lookback=8, num_blocks=num_blocks, filters=3, kernel_size=3)
    state = bb.init_tcn(cfg, rng)
    for p in state.named_parameters().values():
        if p.ndim == 1:
            p[:] = rng.normal(scale=0.1, size=p.shape)
    adaptation = None
    if adapted:
        adaptation = [
            tuple(mech.AdaptationCoefficients.from_vector(rng.uniform(0.5, 1.5, size=3 * cfg.filters)) for _ in range(2))
            for _ in range(num_blocks)
        ]
    x = rng.normal(size=(cfg.input_dim, cfg.lookback))
    y = rng.normal(size=(cfg.horizon, cfg.input_dim))
    return state, adaptation, x, y


def check_network(rng, num_blocks: int = 2, tol: float = 1e-5, backward=bb.backbone_backward) -> CheckResult:
    state, adaptation, x, y = small_network(rng, num_blocks)

    def f():
        return bb.mse_loss(bb.backbone_forward(x, state, adaptation)[0], y)[0]

    forecast, cache = bb.backbone_forward(x, state, adaptation)
    grads = backward(cache, bb.mse_loss(forecast, y)[1])
    inputs = dict(state.named_parameters())
    for i, pair in enumerate(adaptation):
        for j, coeffs in enumerate(pair, start=1):
            # Perturb the packed vector through views into the coefficient arrays.
            inputs[f"blocks.{i}.conv{j}.u"] = _PackedView(coeffs)
    analytic = {name: grads[name] for name in inputs}
    worst, worst_err = "", 0.0
    for name, target in inputs.items():
        if isinstance(target, _PackedView):
            numeric = target.numeric_gradient(f)
        else:
            numeric = numeric_gradient(f, target)
        err = rel_error(analytic[name], numeric)
        if err >= worst_err:
            worst, worst_err = name, err
    return CheckResult(f"tcn_{num_blocks}_block", worst_err, worst, tol)


class _PackedView:
    def __init__(self, coeffs: mech.AdaptationCoefficients):
        self.parts = [coeffs.alpha_w, coeffs.alpha_b, coeffs.beta]

    def numeric_gradient(self, f) -> np.ndarray:
        return np.concatenate([numeric_gradient(f, p) for p in self.parts])


def run_suite(seed: int = 0, overrides: Optional[dict[str, Callable]] = None) -> list[CheckResult]:
    """Check every primitive plus a 2-block end-to-end network.

    ``overrides`` maps an op name to a replacement backward function, so a
    corrupted implementation can be shown to fail.
    """
    overrides = overrides or {}
    rng = np.random.default_rng(seed)
    checks = [
        ("dilated_causal_conv1d", check_conv),
        ("linear", check_linear),
        ("relu", check_relu),
        ("elementwise_mul", check_mul),
        ("adapt_layer", check_adapt_layer),
        ("adapter", check_adapter),
    ]
    results = []
    for name, fn in checks:
        results.append(fn(rng, overrides[name]) if name in overrides else fn(rng))
    results.append(check_mse(rng, overrides["mse_loss"]) if "mse_loss" in overrides else check_mse(rng))
    net_kwargs = {"backward": overrides["tcn"]} if "tcn" in overrides else {}
    results.append(check_network(rng, 2, **net_kwargs))
    return results
