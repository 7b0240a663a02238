from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from fsnet.tensor_ops import ShapeError


@dataclass
class AdamW:
    """Bias-corrected Adam with decoupled weight decay.

    Parameters are updated in place, keyed by name. Moments are allocated the
    first time a name is seen.
    """

    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        missing = set(params) - set(grads)
        if missing:
            raise KeyError(f"no gradient for parameter(s): {sorted(missing)}")
        for name, p in params.items():
            if grads[name].shape != p.shape:
                raise ShapeError(f"gradient for {name} has shape {grads[name].shape}, parameter is {p.shape}")

        self.step_count += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1**self.step_count
        c2 = 1.0 - b2**self.step_count
        for name, p in params.items():
            g = grads[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            if self.weight_decay:
                p *= 1.0 - self.lr * self.weight_decay
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return params
