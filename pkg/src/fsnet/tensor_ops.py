"""Dense layer primitives with hand-written backward passes.

Every forward function has a paired backward function. Arrays are float64
numpy arrays; convolutions use a channels-by-time layout.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class ShapeError(ValueError):
    """Raised when an operand has the wrong shape; names the offending dimension."""


class NonFiniteError(FloatingPointError):
    """Raised when a computation produces NaN or Inf."""


@dataclass
class ConvParams:
    weight: np.ndarray  # [C_out, C_in, K]
    bias: np.ndarray  # [C_out]
    dilation: int = 1

    def __post_init__(self):
        if self.weight.ndim != 3:
            raise ShapeError(f"conv weight must be 3-d [C_out, C_in, K], got shape {self.weight.shape}")
        if self.bias.shape != (self.weight.shape[0],):
            raise ShapeError(
                f"conv bias C_out mismatch: bias {self.bias.shape} vs weight C_out={self.weight.shape[0]}"
            )
        if self.dilation < 1:
            raise ValueError(f"dilation must be >= 1, got {self.dilation}")
        if self.weight.shape[2] < 1:
            raise ValueError("kernel width K must be >= 1")

    @property
    def c_out(self) -> int:
        return self.weight.shape[0]

    @property
    def c_in(self) -> int:
        return self.weight.shape[1]

    @property
    def kernel_size(self) -> int:
        return self.weight.shape[2]


@dataclass
class LinearParams:
    weight: np.ndarray  # [D_out, D_in]
    bias: np.ndarray  # [D_out]

    def __post_init__(self):
        if self.weight.ndim != 2:
            raise ShapeError(f"linear weight must be 2-d [D_out, D_in], got shape {self.weight.shape}")
        if self.bias.shape != (self.weight.shape[0],):
            raise ShapeError(
                f"linear bias D_out mismatch: bias {self.bias.shape} vs weight D_out={self.weight.shape[0]}"
            )


def check_finite(name: str, x: np.ndarray) -> np.ndarray:
    if not np.isfinite(x).all():
        bad = int(np.size(x) - np.isfinite(x).sum())
        raise NonFiniteError(f"{name}: {bad} non-finite value(s)")
    return x


def _check_conv_input(x: np.ndarray, params: ConvParams) -> None:
    if x.ndim != 2:
        raise ShapeError(f"conv input must be 2-d [C_in, T], got shape {x.shape}")
    if x.shape[0] != params.c_in:
        raise ShapeError(f"conv input C_in mismatch: input has {x.shape[0]} channels, weight expects {params.c_in}")
    if x.shape[1] < 1:
        raise ShapeError("conv input T must be >= 1")


def _left_pad(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    return np.concatenate([np.zeros((x.shape[0], pad)), x], axis=1)


def _taps(weight: np.ndarray) -> np.ndarray:
    # [K, C_out, C_in]; strided per-tap slices of the weight are far slower in matmul.
    return np.ascontiguousarray(weight.transpose(2, 0, 1))


def dilated_causal_conv1d(x: np.ndarray, params: ConvParams) -> np.ndarray:
    """out[c, t] = bias[c] + sum_{i,k} W[c, i, k] * x[i, t - (K-1-k) * dilation].

    Positions before the start of the sequence read as zero, so the output at
    time t never depends on inputs after t.
    """
    _check_conv_input(x, params)
    K, dil = params.kernel_size, params.dilation
    T = x.shape[1]
    xp = _left_pad(x, (K - 1) * dil)
    taps = _taps(params.weight)
    out = np.empty((params.c_out, T))
    out[:] = params.bias[:, None]
    for k in range(K):
        out += taps[k] @ xp[:, k * dil : k * dil + T]
    return out


def dilated_causal_conv1d_backward(
    grad_out: np.ndarray, x: np.ndarray, params: ConvParams
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return (grad_input, grad_weight, grad_bias) for one conv call."""
    _check_conv_input(x, params)
    T = x.shape[1]
    if grad_out.shape != (params.c_out, T):
        raise ShapeError(f"grad_out shape {grad_out.shape} does not match conv output ({params.c_out}, {T})")
    K, dil = params.kernel_size, params.dilation
    pad = (K - 1) * dil
    xp = _left_pad(x, pad)
    taps = _taps(params.weight)
    grad_taps = np.empty_like(taps)
    grad_xp = np.zeros_like(xp)
    for k in range(K):
        window = slice(k * dil, k * dil + T)
        grad_taps[k] = grad_out @ xp[:, window].T
        grad_xp[:, window] += taps[k].T @ grad_out
    return grad_xp[:, pad:], grad_taps.transpose(1, 2, 0).copy(), grad_out.sum(axis=1)


def linear_forward(x: np.ndarray, params: LinearParams) -> np.ndarray:
    if x.shape != (params.weight.shape[1],):
        raise ShapeError(f"linear input D_in mismatch: input {x.shape} vs weight D_in={params.weight.shape[1]}")
    return params.weight @ x + params.bias


def linear_backward(
    grad_out: np.ndarray, x: np.ndarray, params: LinearParams
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    if grad_out.shape != (params.weight.shape[0],):
        raise ShapeError(f"grad_out D_out mismatch: {grad_out.shape} vs D_out={params.weight.shape[0]}")
    if x.shape != (params.weight.shape[1],):
        raise ShapeError(f"linear input D_in mismatch: input {x.shape} vs weight D_in={params.weight.shape[1]}")
    return params.weight.T @ grad_out, np.outer(grad_out, x), grad_out.copy()


def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(grad_out: np.ndarray, x: np.ndarray) -> np.ndarray:
    if grad_out.shape != x.shape:
        raise ShapeError(f"relu grad shape {grad_out.shape} does not match input {x.shape}")
    return grad_out * (x > 0)


def elementwise_mul_forward(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape != b.shape:
        raise ShapeError(f"elementwise operands differ in shape: {a.shape} vs {b.shape}")
    return a * b


def elementwise_mul_backward(grad_out: np.ndarray, a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    if not (grad_out.shape == a.shape == b.shape):
        raise ShapeError(f"elementwise backward shapes differ: grad {grad_out.shape}, a {a.shape}, b {b.shape}")
    return grad_out * b, grad_out * a
