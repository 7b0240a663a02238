"""Temporal convolutional forecaster with explicit forward/backward passes."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from fsnet.mechanism import AdaptationCoefficients, adapt_layer, adapt_layer_backward
from fsnet.tensor_ops import (
    ConvParams,
    LinearParams,
    ShapeError,
    check_finite,
    dilated_causal_conv1d,
    dilated_causal_conv1d_backward,
    linear_backward,
    linear_forward,
    relu_backward,
    relu_forward,
)

CHECKPOINT_VERSION = 1

# One (conv1, conv2) coefficient pair per block.
BlockAdaptation = tuple[AdaptationCoefficients, AdaptationCoefficients]


class StaleCacheError(RuntimeError):
    pass


@dataclass(frozen=True)
class TcnConfig:
    input_dim: int
    horizon: int
    lookback: int = 60
    num_blocks: int = 10
    filters: int = 64
    kernel_size: int = 3

    def __post_init__(self):
        for name in ("input_dim", "horizon", "lookback", "num_blocks", "filters", "kernel_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")

    def dilation(self, block: int) -> int:
        return 2**block


@dataclass
class Block:
    conv1: ConvParams
    conv2: ConvParams
    proj: Optional[ConvParams] = None  # 1x1 residual projection, only when channel counts differ

    def adapted_grad_size(self) -> int:
        """Length of the flattened gradient over both convs' weights and biases."""
        return sum(c.weight.size + c.bias.size for c in (self.conv1, self.conv2))


@dataclass
class TcnState:
    config: TcnConfig
    input_proj: ConvParams
    blocks: list[Block]
    regressor: LinearParams

    def __post_init__(self):
        if len(self.blocks) != self.config.num_blocks:
            raise ValueError(f"expected {self.config.num_blocks} blocks, got {len(self.blocks)}")

    def named_parameters(self) -> dict[str, np.ndarray]:
        """Name -> array, in a fixed order. Arrays are the live parameter storage."""
        out = {"input.weight": self.input_proj.weight, "input.bias": self.input_proj.bias}
        for i, blk in enumerate(self.blocks):
            for role in ("conv1", "conv2", "proj"):
                conv = getattr(blk, role)
                if conv is not None:
                    out[f"blocks.{i}.{role}.weight"] = conv.weight
                    out[f"blocks.{i}.{role}.bias"] = conv.bias
        out["regressor.weight"] = self.regressor.weight
        out["regressor.bias"] = self.regressor.bias
        return out

    def num_parameters(self) -> int:
        return sum(p.size for p in self.named_parameters().values())

    def copy(self) -> "TcnState":
        def cp(c):
            return None if c is None else ConvParams(c.weight.copy(), c.bias.copy(), c.dilation)

        return TcnState(
            self.config,
            cp(self.input_proj),
            [Block(cp(b.conv1), cp(b.conv2), cp(b.proj)) for b in self.blocks],
            LinearParams(self.regressor.weight.copy(), self.regressor.bias.copy()),
        )


def _uniform_conv(rng, c_out, c_in, k, dilation) -> ConvParams:
    bound = 1.0 / math.sqrt(c_in * k)
    return ConvParams(rng.uniform(-bound, bound, size=(c_out, c_in, k)), np.zeros(c_out), dilation)


def init_tcn(config: TcnConfig, rng: np.random.Generator) -> TcnState:
    f, k = config.filters, config.kernel_size
    input_proj = _uniform_conv(rng, f, config.input_dim, 1, 1)
    blocks = []
    for b in range(config.num_blocks):
        dil = config.dilation(b)
        blocks.append(Block(_uniform_conv(rng, f, f, k, dil), _uniform_conv(rng, f, f, k, dil)))
    bound = 1.0 / math.sqrt(f)
    regressor = LinearParams(
        rng.uniform(-bound, bound, size=(config.horizon * config.input_dim, f)),
        np.zeros(config.horizon * config.input_dim),
    )
    return TcnState(config, input_proj, blocks, regressor)


@dataclass
class _BlockCache:
    x: np.ndarray
    conv1: ConvParams
    conv2: ConvParams
    proj: Optional[ConvParams]
    tilde1: ConvParams
    tilde2: ConvParams
    raw1: np.ndarray
    pre1: np.ndarray
    act1: np.ndarray
    raw2: np.ndarray
    pre2: np.ndarray
    adaptation: BlockAdaptation


@dataclass
class ForwardCache:
    x: np.ndarray
    input_proj: ConvParams
    blocks: list[_BlockCache]
    features: np.ndarray
    regressor: LinearParams
    adapted: bool
    config: TcnConfig
    consumed: bool = field(default=False)


def _frozen(c: Optional[ConvParams]) -> Optional[ConvParams]:
    return None if c is None else ConvParams(c.weight.copy(), c.bias.copy(), c.dilation)


def backbone_forward(
    x: np.ndarray, state: TcnState, adaptation: Optional[Sequence[BlockAdaptation]] = None
) -> tuple[np.ndarray, ForwardCache]:
    """Forecast an ``[H, n]`` window from an ``[n, E]`` look-back window.

    Each block computes ``relu(m2 * conv2(relu(m1 * conv1(x)))) + skip(x)``
    where ``m`` are the optional per-channel modulations.
    """
    cfg = state.config
    if x.shape != (cfg.input_dim, cfg.lookback):
        raise ShapeError(f"input must be [n={cfg.input_dim}, E={cfg.lookback}], got {x.shape}")
    if adaptation is not None and len(adaptation) != len(state.blocks):
        raise ShapeError(f"got adaptation for {len(adaptation)} blocks, model has {len(state.blocks)}")

    h = dilated_causal_conv1d(x, state.input_proj)
    block_caches = []
    for i, blk in enumerate(state.blocks):
        if adaptation is None:
            adapt = (AdaptationCoefficients.identity(blk.conv1.c_out), AdaptationCoefficients.identity(blk.conv2.c_out))
        else:
            adapt = adaptation[i]
        conv1, conv2 = _frozen(blk.conv1), _frozen(blk.conv2)
        pre1, tilde1, raw1 = adapt_layer(conv1, h, adapt[0])
        act1 = relu_forward(pre1)
        pre2, tilde2, raw2 = adapt_layer(conv2, act1, adapt[1])
        skip = h if blk.proj is None else dilated_causal_conv1d(h, blk.proj)
        out = relu_forward(pre2) + skip
        check_finite(f"block {i} output", out)
        block_caches.append(
            _BlockCache(h, conv1, conv2, _frozen(blk.proj), tilde1, tilde2, raw1, pre1, act1, raw2, pre2, adapt)
        )
        h = out

    features = h[:, -1].copy()
    regressor = LinearParams(state.regressor.weight.copy(), state.regressor.bias.copy())
    forecast = linear_forward(features, regressor).reshape(cfg.horizon, cfg.input_dim)
    check_finite("forecast", forecast)
    cache = ForwardCache(x, _frozen(state.input_proj), block_caches, features, regressor, adaptation is not None, cfg)
    return forecast, cache


def backbone_backward(cache: ForwardCache, grad_forecast: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients for every trainable tensor, keyed like :meth:`TcnState.named_parameters`.

    When the forward pass was adapted, ``blocks.{i}.conv{j}.u`` keys carry
    gradients of the packed coefficient vectors.
    """
    if cache.consumed:
        raise StaleCacheError("forward cache was already consumed by a backward pass")
    cfg = cache.config
    if grad_forecast.shape != (cfg.horizon, cfg.input_dim):
        raise ShapeError(f"grad_forecast must be [H={cfg.horizon}, n={cfg.input_dim}], got {grad_forecast.shape}")
    cache.consumed = True

    grads: dict[str, np.ndarray] = {}
    g_feat, grads["regressor.weight"], grads["regressor.bias"] = linear_backward(
        grad_forecast.ravel(), cache.features, cache.regressor
    )
    g = np.zeros((cache.regressor.weight.shape[1], cache.x.shape[1]))
    g[:, -1] = g_feat

    for i in range(len(cache.blocks) - 1, -1, -1):
        bc = cache.blocks[i]
        prefix = f"blocks.{i}"
        if bc.proj is None:
            g_x = g.copy()
        else:
            g_x, grads[f"{prefix}.proj.weight"], grads[f"{prefix}.proj.bias"] = dilated_causal_conv1d_backward(
                g, bc.x, bc.proj
            )
        g_pre2 = relu_backward(g, bc.pre2)
        g_act1, gw2, gb2, gu2 = adapt_layer_backward(g_pre2, bc.act1, bc.conv2, bc.tilde2, bc.raw2, bc.adaptation[1])
        g_pre1 = relu_backward(g_act1, bc.pre1)
        g_in, gw1, gb1, gu1 = adapt_layer_backward(g_pre1, bc.x, bc.conv1, bc.tilde1, bc.raw1, bc.adaptation[0])
        grads[f"{prefix}.conv1.weight"], grads[f"{prefix}.conv1.bias"] = gw1, gb1
        grads[f"{prefix}.conv2.weight"], grads[f"{prefix}.conv2.bias"] = gw2, gb2
        if cache.adapted:
            grads[f"{prefix}.conv1.u"], grads[f"{prefix}.conv2.u"] = gu1, gu2
        g = g_x + g_in

    _, grads["input.weight"], grads["input.bias"] = dilated_causal_conv1d_backward(g, cache.x, cache.input_proj)
    return grads


def block_gradient(grads: dict[str, np.ndarray], block: int) -> np.ndarray:
    """Flattened gradient of one block's two convolutions (weights then bias, conv1 then conv2)."""
    p = f"blocks.{block}"
    return np.concatenate(
        [grads[f"{p}.conv1.weight"].ravel(), grads[f"{p}.conv1.bias"], grads[f"{p}.conv2.weight"].ravel(), grads[f"{p}.conv2.bias"]]
    )


def mse_loss(y_hat: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """Loss ``(1/H) * sum_i ||y_hat_i - y_i||^2`` over an ``[H, n]`` window, and its gradient."""
    if y_hat.shape != y.shape:
        raise ShapeError(f"forecast shape {y_hat.shape} does not match target {y.shape}")
    diff = y_hat - y
    h = y.shape[0]
    return float((diff * diff).sum() / h), 2.0 * diff / h


def save_checkpoint(path: str | Path, state: TcnState) -> None:
    meta = {"format_version": CHECKPOINT_VERSION, "config": asdict(state.config)}
    arrays = {name: arr for name, arr in state.named_parameters().items()}
    dilations = {f"blocks.{i}": [blk.conv1.dilation, blk.conv2.dilation] for i, blk in enumerate(state.blocks)}
    meta["dilations"] = dilations
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8), **arrays)


def load_checkpoint(path: str | Path) -> TcnState:
    with np.load(path) as data:
        meta = json.loads(bytes(data["__meta__"]).decode())
        if meta.get("format_version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta.get('format_version')!r} in {path}")
        cfg = TcnConfig(**meta["config"])
        arr = {k: data[k].copy() for k in data.files if k != "__meta__"}

    def conv(prefix, dilation):
        if f"{prefix}.weight" not in arr:
            return None
        return ConvParams(arr[f"{prefix}.weight"], arr[f"{prefix}.bias"], dilation)

    blocks = []
    for i in range(cfg.num_blocks):
        d1, d2 = meta["dilations"][f"blocks.{i}"]
        blocks.append(Block(conv(f"blocks.{i}.conv1", d1), conv(f"blocks.{i}.conv2", d2), conv(f"blocks.{i}.proj", 1)))
    return TcnState(
        cfg, conv("input", 1), blocks, LinearParams(arr["regressor.weight"], arr["regressor.bias"])
    )
