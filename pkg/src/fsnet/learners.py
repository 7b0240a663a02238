"""Online learners sharing one interface: ``step``, ``warmup_train``, ``predict``, ``snapshot``.

Every ``step`` forecasts with the current parameters before looking at the
target, then trains on the revealed target. The returned report carries
that pre-update forecast.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional

import numpy as np

from fsnet.backbone import TcnConfig, TcnState, backbone_backward, backbone_forward, block_gradient, init_tcn, mse_loss
from fsnet.data import StreamSample
from fsnet.mechanism import (
    AdaptationCoefficients,
    AdapterParams,
    FsnetHyperparams,
    adapter_backward,
    adapter_forward,
    cosine,
    ema_update,
    memory_read,
    memory_write,
)
from fsnet.optim import AdamW
from fsnet.replay import ReservoirBuffer
from fsnet.tensor_ops import NonFiniteError

LEARNER_KINDS = ("onlinetcn", "er", "fsnet", "nomemory", "naive", "largememory")
EventSink = Callable[[dict], None]


@dataclass
class StepReport:
    loss: float
    forecast: np.ndarray
    triggers: list[bool] = field(default_factory=list)


def _sub_rng(seed: int, stream: int) -> np.random.Generator:
    # Stream 0 is the backbone; every learner built from the same seed shares its init.
    return np.random.default_rng([seed, stream]) if stream else np.random.default_rng(seed)


class OnlineTCN:
    """Plain per-sample gradient training of the TCN forecaster."""

    kind = "onlinetcn"

    def __init__(self, config: TcnConfig, seed: int = 0, lr: float = 1e-3, weight_decay: float = 0.0):
        self.config = config
        self.seed = seed
        self.model: TcnState = init_tcn(config, _sub_rng(seed, 0))
        self.optimizer = AdamW(lr=lr, weight_decay=weight_decay)
        self.steps = 0

    def trainable(self) -> dict[str, np.ndarray]:
        return self.model.named_parameters()

    def predict(self, x: np.ndarray) -> np.ndarray:
        return backbone_forward(x, self.model)[0]

    def _forward_backward(self, sample: StreamSample, scale: float = 1.0):
        forecast, cache = backbone_forward(sample.lookback, self.model)
        loss, grad = mse_loss(forecast, sample.target)
        grads = backbone_backward(cache, scale * grad)
        return forecast, loss, grads

    def step(self, sample: StreamSample) -> StepReport:
        forecast, loss, grads = self._forward_backward(sample)
        self.optimizer.step(self.trainable(), grads)
        self.steps += 1
        return StepReport(loss, forecast)

    def warmup_train(self, samples: Iterable[StreamSample], epochs: int = 1):
        samples = list(samples)
        for _ in range(epochs):
            for s in samples:
                self.step(s)
        return self

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.trainable().items()}

    def parameter_report(self) -> dict[str, int]:
        return {"backbone": self.model.num_parameters()}


class ExperienceReplay(OnlineTCN):
    """OnlineTCN plus replay of reservoir-sampled past windows in every step."""

    kind = "er"

    def __init__(
        self,
        config: TcnConfig,
        seed: int = 0,
        lr: float = 1e-3,
        weight_decay: float = 0.0,
        capacity: int = 500,
        replay_batch: int = 8,
        lambda_er: float = 0.2,
    ):
        super().__init__(config, seed, lr, weight_decay)
        self.buffer = ReservoirBuffer(capacity, _sub_rng(seed, 1))
        self.replay_batch = replay_batch
        self.lambda_er = lambda_er

    def step(self, sample: StreamSample) -> StepReport:
        forecast, loss, grads = self._forward_backward(sample)
        total = loss
        if self.lambda_er:
            for old in self.buffer.sample(self.replay_batch):
                _, old_loss, old_grads = self._forward_backward(old, self.lambda_er)
                total += self.lambda_er * old_loss
                for k, g in old_grads.items():
                    grads[k] += g
        self.optimizer.step(self.trainable(), grads)
        self.buffer.add(sample)
        self.steps += 1
        return StepReport(total, forecast)

    def parameter_report(self) -> dict[str, int]:
        cfg = self.config
        per_sample = cfg.input_dim * cfg.lookback + cfg.horizon * cfg.input_dim
        return {"backbone": self.model.num_parameters(), "episodic_memory": self.buffer.capacity * per_sample}


@dataclass
class LayerFastState:
    g_hat: Optional[np.ndarray]
    g_hat_prime: Optional[np.ndarray] = None
    u_hat: Optional[np.ndarray] = None
    memory: Optional[np.ndarray] = None
    memory_written: bool = False
    trigger: bool = False


class FSNet(OnlineTCN):
    """TCN whose blocks are modulated by coefficients computed from gradient EMAs.

    ``variant`` selects the ablation: ``"full"`` (adapter + associative
    memory), ``"nomemory"`` (adapter only) or ``"naive"`` (coefficients are
    free parameters trained by the optimizer; no gradient EMAs).
    """

    kind = "fsnet"

    def __init__(
        self,
        config: TcnConfig,
        seed: int = 0,
        lr: float = 1e-3,
        weight_decay: float = 0.0,
        hp: FsnetHyperparams = FsnetHyperparams(),
        variant: str = "full",
        event_sink: Optional[EventSink] = None,
    ):
        if variant not in ("full", "nomemory", "naive"):
            raise ValueError(f"unknown FSNet variant {variant!r}")
        super().__init__(config, seed, lr, weight_decay)
        self.hp = hp
        self.variant = variant
        self.event_sink = event_sink
        rng = _sub_rng(seed, 2)
        self.adapters: list[AdapterParams] = []
        self.naive_u: list[np.ndarray] = []
        self.fast: list[LayerFastState] = []
        for blk in self.model.blocks:
            d = 3 * (blk.conv1.c_out + blk.conv2.c_out)
            if variant == "naive":
                self.naive_u.append(np.ones(d))
                self.fast.append(LayerFastState(g_hat=None))
                continue
            dim = blk.adapted_grad_size()
            self.adapters.append(AdapterParams.init(dim, d, hp.adapter_hidden, rng))
            state = LayerFastState(g_hat=np.zeros(dim), memory=np.zeros((hp.memory_size, d)))
            if variant == "full":
                state.g_hat_prime = np.zeros(dim)
                state.u_hat = np.zeros(d)
            self.fast.append(state)
        self.trigger_counts = [0] * len(self.model.blocks)

    def trainable(self) -> dict[str, np.ndarray]:
        params = self.model.named_parameters()
        for i, ad in enumerate(self.adapters):
            params[f"adapter.{i}.w1"] = ad.w1
            params[f"adapter.{i}.w2"] = ad.w2
        for i, u in enumerate(self.naive_u):
            params[f"naive.{i}.u"] = u
        return params

    @staticmethod
    def _split(u: np.ndarray) -> tuple[AdaptationCoefficients, AdaptationCoefficients]:
        half = u.size // 2
        return AdaptationCoefficients.from_vector(u[:half]), AdaptationCoefficients.from_vector(u[half:])

    def _coefficients(self, interact: bool):
        """Per-block coefficients; with ``interact`` set, triggered blocks talk to their memory."""
        adaptation, ctx = [], []
        for i, fs in enumerate(self.fast):
            if self.variant == "naive":
                adaptation.append(self._split(self.naive_u[i]))
                ctx.append(None)
                continue
            dev, acache = adapter_forward(fs.g_hat, self.adapters[i])
            used, scale, read = dev, 1.0, None
            if interact and fs.trigger:
                tau = self.hp.tau
                u_tilde, r_k = memory_read(fs.memory, fs.u_hat, self.hp.top_k)
                if not fs.memory_written:
                    # Nothing stored yet: retrieve no deviation, but still write
                    # to the rows the (uniform) attention selected.
                    u_tilde = np.zeros_like(u_tilde)
                fs.memory = memory_write(fs.memory, fs.u_hat, r_k, tau)
                fs.memory_written = True
                used, scale = tau * dev + (1.0 - tau) * u_tilde, tau
                fs.trigger = False
                read = r_k
            adaptation.append(self._split(1.0 + used))
            ctx.append((dev, acache, scale, read))
        return adaptation, ctx

    def predict(self, x: np.ndarray) -> np.ndarray:
        adaptation, _ = self._coefficients(interact=False)
        return backbone_forward(x, self.model, adaptation)[0]

    def _diagnostics(self) -> str:
        parts = []
        for i, blk in enumerate(self.model.blocks):
            parts.append(f"block {i}: |w1|={np.linalg.norm(blk.conv1.weight):.3g} |w2|={np.linalg.norm(blk.conv2.weight):.3g}")
            fs = self.fast[i]
            if fs.g_hat is not None:
                parts.append(f"  |g_hat|={np.linalg.norm(fs.g_hat):.3g}")
        parts.append(f"|regressor|={np.linalg.norm(self.model.regressor.weight):.3g}")
        return "\n".join(parts)

    def step(self, sample: StreamSample) -> StepReport:
        hp = self.hp
        adaptation, ctx = self._coefficients(interact=self.variant == "full")
        try:
            forecast, cache = backbone_forward(sample.lookback, self.model, adaptation)
            loss, grad = mse_loss(forecast, sample.target)
            if not np.isfinite(loss):
                raise NonFiniteError(f"loss is {loss}")
        except NonFiniteError as exc:
            raise NonFiniteError(f"step {self.steps}: {exc}\n{self._diagnostics()}") from exc
        grads = backbone_backward(cache, grad)

        for i in range(len(self.fast)):
            g_u = np.concatenate([grads.pop(f"blocks.{i}.conv1.u"), grads.pop(f"blocks.{i}.conv2.u")])
            if self.variant == "naive":
                grads[f"naive.{i}.u"] = g_u
            else:
                dev, acache, scale, _ = ctx[i]
                grads[f"adapter.{i}.w1"], grads[f"adapter.{i}.w2"] = adapter_backward(scale * g_u, acache, self.adapters[i])
        self.optimizer.step(self.trainable(), grads)

        triggers = []
        for i, fs in enumerate(self.fast):
            if self.variant == "naive":
                continue
            g = block_gradient(grads, i)
            fs.g_hat = ema_update(fs.g_hat, g, hp.gamma)
            if self.variant != "full":
                continue
            fs.g_hat_prime = ema_update(fs.g_hat_prime, g, hp.gamma_prime)
            fs.u_hat = ema_update(fs.u_hat, ctx[i][0], hp.gamma_prime)
            cos = cosine(fs.g_hat, fs.g_hat_prime)
            fs.trigger = cos < -hp.tau
            self.trigger_counts[i] += fs.trigger
            triggers.append(fs.trigger)
            if self.event_sink is not None:
                r_k = ctx[i][3]
                rows = [] if r_k is None else [int(j) for j in np.flatnonzero(r_k)]
                self.event_sink(
                    {
                        "step": self.steps,
                        "layer": i,
                        "cosine": cos,
                        "triggered": bool(fs.trigger),
                        "read_rows": rows,
                        "attention_weights": [float(r_k[j]) for j in rows],
                    }
                )
        self.steps += 1
        return StepReport(loss, forecast, triggers)

    def snapshot(self) -> dict[str, np.ndarray]:
        snap = super().snapshot()
        for i, fs in enumerate(self.fast):
            for name in ("g_hat", "g_hat_prime", "u_hat", "memory"):
                value = getattr(fs, name)
                if value is not None:
                    snap[f"fast.{i}.{name}"] = value.copy()
        return snap

    def parameter_report(self) -> dict[str, int]:
        report = {"backbone": self.model.num_parameters()}
        if self.variant == "naive":
            report["adapter"] = sum(u.size for u in self.naive_u)
            return report
        report["adapter"] = sum(a.w1.size + a.w2.size for a in self.adapters)
        report["g_ema"] = sum(fs.g_hat.size + (0 if fs.g_hat_prime is None else fs.g_hat_prime.size) for fs in self.fast)
        if self.variant == "full":
            report["associative_memory"] = sum(fs.memory.size + fs.u_hat.size for fs in self.fast)
        return report


def make_variant(
    kind: str,
    config: TcnConfig,
    seed: int = 0,
    lr: float = 1e-3,
    hp: Optional[FsnetHyperparams] = None,
    event_sink: Optional[EventSink] = None,
    **kwargs,
):
    """Build a learner by name: one of :data:`LEARNER_KINDS`."""
    hp = hp or FsnetHyperparams()
    if kind == "onlinetcn":
        return OnlineTCN(config, seed, lr, **kwargs)
    if kind == "er":
        return ExperienceReplay(config, seed, lr, **kwargs)
    if kind == "fsnet":
        return FSNet(config, seed, lr, hp=hp, variant="full", event_sink=event_sink, **kwargs)
    if kind == "nomemory":
        return FSNet(config, seed, lr, hp=hp, variant="nomemory", event_sink=event_sink, **kwargs)
    if kind == "naive":
        return FSNet(config, seed, lr, hp=hp, variant="naive", event_sink=event_sink, **kwargs)
    if kind == "largememory":
        large = FsnetHyperparams(hp.gamma, hp.gamma_prime, hp.tau, hp.top_k, 128, hp.adapter_hidden)
        return FSNet(config, seed, lr, hp=large, variant="full", event_sink=event_sink, **kwargs)
    raise ValueError(f"unknown learner kind {kind!r}; choose from {', '.join(LEARNER_KINDS)}")
