from __future__ import annotations

from typing import Any

import numpy as np


class ReservoirBuffer:
    """Fixed-capacity uniform sample of everything inserted so far (reservoir sampling)."""

    def __init__(self, capacity: int = 500, rng: np.random.Generator | None = None):
        if capacity < 1:
            raise ValueError(f"capacity must be >= 1, got {capacity}")
        self.capacity = capacity
        self.items: list[Any] = []
        self.seen_count = 0
        self.rng = rng if rng is not None else np.random.default_rng(0)

    def add(self, item: Any) -> None:
        if len(self.items) < self.capacity:
            self.items.append(item)
        else:
            j = int(self.rng.integers(0, self.seen_count + 1))
            if j < self.capacity:
                self.items[j] = item
        self.seen_count += 1

    def sample(self, batch_size: int) -> list[Any]:
        """Uniform draw without replacement; fewer items if the buffer is small."""
        if not self.items or batch_size <= 0:
            return []
        idx = self.rng.choice(len(self.items), size=min(batch_size, len(self.items)), replace=False)
        return [self.items[i] for i in idx]

    def __len__(self) -> int:
        return len(self.items)
