"""Fast-adaptation primitives: gradient EMAs, the chunked adapter,
per-channel weight/feature modulation, the interference trigger and the
sparse associative memory.

Adapter outputs are *deviations* from identity: a coefficient vector used
by a layer is ``1 + deviation``. EMAs of coefficients and memory items store
deviations too.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from fsnet.tensor_ops import ConvParams, ShapeError, dilated_causal_conv1d, dilated_causal_conv1d_backward

COSINE_EPS = 1e-12


@dataclass(frozen=True)
class FsnetHyperparams:
    gamma: float = 0.9
    gamma_prime: float = 0.3
    tau: float = 0.75
    top_k: int = 2
    memory_size: int = 32
    adapter_hidden: int = 32

    def __post_init__(self):
        if not 0 < self.gamma_prime < self.gamma < 1:
            raise ValueError(f"need 0 < gamma_prime < gamma < 1, got gamma={self.gamma}, gamma_prime={self.gamma_prime}")
        # tau == 1 is allowed: it disables the trigger entirely.
        if not 0 < self.tau <= 1:
            raise ValueError(f"tau must lie in (0, 1], got {self.tau}")
        if not 1 <= self.top_k <= self.memory_size:
            raise ValueError(f"need 1 <= top_k <= memory_size, got top_k={self.top_k}, N={self.memory_size}")
        if self.adapter_hidden < 1:
            raise ValueError("adapter_hidden must be >= 1")


@dataclass
class AdaptationCoefficients:
    """Per-output-channel multipliers for one convolution."""

    alpha_w: np.ndarray
    alpha_b: np.ndarray
    beta: np.ndarray

    @classmethod
    def identity(cls, c_out: int) -> "AdaptationCoefficients":
        return cls(np.ones(c_out), np.ones(c_out), np.ones(c_out))

    @classmethod
    def from_vector(cls, u: np.ndarray) -> "AdaptationCoefficients":
        if u.ndim != 1 or u.size % 3:
            raise ShapeError(f"packed coefficient vector must have length 3*C_out, got {u.shape}")
        c = u.size // 3
        return cls(u[:c], u[c : 2 * c], u[2 * c :])

    @property
    def c_out(self) -> int:
        return self.alpha_w.size

    def vector(self) -> np.ndarray:
        """Packed ``[alpha_w; alpha_b; beta]``."""
        return np.concatenate([self.alpha_w, self.alpha_b, self.beta])


@dataclass
class AdapterParams:
    w1: np.ndarray  # [hid, chunk_size], shared by every chunk
    w2: np.ndarray  # [1, hid]
    d: int

    @property
    def chunk_size(self) -> int:
        return self.w1.shape[1]

    @classmethod
    def init(cls, grad_dim: int, d: int, hidden: int, rng: np.random.Generator) -> "AdapterParams":
        cs = chunk_size(grad_dim, d)
        bound = 1.0 / math.sqrt(cs)
        # Zero second layer: the adapter starts at exactly zero deviation.
        return cls(rng.uniform(-bound, bound, size=(hidden, cs)), np.zeros((1, hidden)), d)


def chunk_size(grad_dim: int, d: int) -> int:
    if d < 1:
        raise ValueError("coefficient dimension d must be >= 1")
    return -(-grad_dim // d)


def ema_update(prev: np.ndarray, current: np.ndarray, coeff: float) -> np.ndarray:
    if prev.shape != current.shape:
        raise ShapeError(f"EMA operands differ in shape: {prev.shape} vs {current.shape}")
    return coeff * prev + (1.0 - coeff) * current


def _chunks(g_hat: np.ndarray, params: AdapterParams) -> np.ndarray:
    cs = params.chunk_size
    flat = g_hat.ravel()
    if flat.size > params.d * cs:
        raise ShapeError(f"gradient of length {flat.size} does not fit {params.d} chunks of size {cs}")
    padded = np.zeros(params.d * cs)
    padded[: flat.size] = flat
    return padded.reshape(params.d, cs)


def adapter_forward(g_hat: np.ndarray, params: AdapterParams) -> tuple[np.ndarray, tuple]:
    """Map a gradient EMA to a coefficient deviation of length ``d``.

    Returns the deviation and a cache for :func:`adapter_backward`. The
    coefficient applied to the layer is ``1 + deviation``.
    """
    blocks = _chunks(g_hat, params)
    hidden = blocks @ params.w1.T
    dev = hidden @ params.w2[0]
    return dev, (blocks, hidden)


def adapter_backward(grad_dev: np.ndarray, cache: tuple, params: AdapterParams) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of (w1, w2). The gradient EMA input is treated as a constant."""
    blocks, hidden = cache
    grad_w2 = (grad_dev @ hidden)[None, :]
    grad_hidden = np.outer(grad_dev, params.w2[0])
    return grad_hidden.T @ blocks, grad_w2


def adapt_layer(
    theta: ConvParams, h_in: np.ndarray, u: AdaptationCoefficients
) -> tuple[np.ndarray, ConvParams, np.ndarray]:
    """Modulated convolution: scale each output channel's filter, bias and feature map.

    Returns ``(h_out, theta_tilde, h_raw)`` where ``h_raw`` is the conv output
    before feature scaling (kept for the backward pass).
    """
    if u.c_out != theta.c_out:
        raise ShapeError(f"coefficient C_out={u.c_out} does not match conv C_out={theta.c_out}")
    theta_tilde = ConvParams(theta.weight * u.alpha_w[:, None, None], theta.bias * u.alpha_b, theta.dilation)
    h_raw = dilated_causal_conv1d(h_in, theta_tilde)
    return h_raw * u.beta[:, None], theta_tilde, h_raw


def adapt_layer_backward(
    grad_out: np.ndarray,
    h_in: np.ndarray,
    theta: ConvParams,
    theta_tilde: ConvParams,
    h_raw: np.ndarray,
    u: AdaptationCoefficients,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Return (grad_h_in, grad_weight, grad_bias, grad_u_packed).

    Weight and bias gradients are taken with respect to the unadapted
    parameters, through the per-channel scaling.
    """
    grad_beta = (grad_out * h_raw).sum(axis=1)
    grad_h_in, grad_wt, grad_bt = dilated_causal_conv1d_backward(grad_out * u.beta[:, None], h_in, theta_tilde)
    grad_alpha_w = (grad_wt * theta.weight).sum(axis=(1, 2))
    grad_alpha_b = grad_bt * theta.bias
    grad_w = grad_wt * u.alpha_w[:, None, None]
    grad_b = grad_bt * u.alpha_b
    return grad_h_in, grad_w, grad_b, np.concatenate([grad_alpha_w, grad_alpha_b, grad_beta])


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    if a.shape != b.shape:
        raise ShapeError(f"cosine operands differ in shape: {a.shape} vs {b.shape}")
    return float(a.ravel() @ b.ravel()) / (float(np.linalg.norm(a)) * float(np.linalg.norm(b)) + COSINE_EPS)


def trigger_check(g_hat: np.ndarray, g_hat_prime: np.ndarray, tau: float) -> bool:
    """True when the slow and fast gradient EMAs point in strongly opposing directions."""
    return cosine(g_hat, g_hat_prime) < -tau


def softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max())
    return e / e.sum()


def memory_read(memory: np.ndarray, u_hat: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Top-k attention read.

    Returns ``(u_tilde, r_k)`` where ``r_k`` is a dense length-N vector holding
    the raw softmax weights of the k selected rows and zeros elsewhere. The
    selected weights are not renormalized. Ties go to the lower row index.
    """
    n, d = memory.shape
    if u_hat.shape != (d,):
        raise ShapeError(f"query length {u_hat.shape} does not match memory width d={d}")
    if not 1 <= k <= n:
        raise ValueError(f"top_k must satisfy 1 <= k <= N={n}, got {k}")
    r = softmax(memory @ u_hat)
    top = np.argsort(-r, kind="stable")[:k]
    r_k = np.zeros(n)
    r_k[top] = r[top]
    return r_k @ memory, r_k


def memory_write(memory: np.ndarray, u_hat: np.ndarray, r_k: np.ndarray, tau: float) -> np.ndarray:
    """Decay every item by tau, add ``(1 - tau) * r_k[i] * u_hat`` to row i, clip rows to unit norm."""
    n, d = memory.shape
    if u_hat.shape != (d,) or r_k.shape != (n,):
        raise ShapeError(f"write operands do not fit memory {memory.shape}: u_hat {u_hat.shape}, r_k {r_k.shape}")
    out = tau * memory + (1.0 - tau) * np.outer(r_k, u_hat)
    norms = np.linalg.norm(out, axis=1)
    return out / np.maximum(1.0, norms)[:, None]
