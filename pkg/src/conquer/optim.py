"""Adam with decoupled weight decay (AdamW)."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .tensor import Tensor


@dataclass
class OptimizerState:
    lr: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    step: int = 0
    exp_avg: dict[int, np.ndarray] = field(default_factory=dict)
    exp_avg_sq: dict[int, np.ndarray] = field(default_factory=dict)


class AdamW:
    def __init__(self, params: Iterable[Tensor], lr: float = 1e-4, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.01):
        self.params = [p for p in params if p.requires_grad]
        self.state = OptimizerState(lr=lr, betas=tuple(betas), eps=eps, weight_decay=weight_decay)
        for i, p in enumerate(self.params):
            self.state.exp_avg[i] = np.zeros_like(p.data)
            self.state.exp_avg_sq[i] = np.zeros_like(p.data)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, allow_missing: bool = False) -> None:
        """Apply one update.  Parameters without a gradient raise unless ``allow_missing``."""
        st = self.state
        missing = [p.name or f"#{i}" for i, p in enumerate(self.params) if p.grad is None]
        if missing and not allow_missing:
            raise ValueError(f"missing gradient for parameters: {', '.join(missing[:5])}")
        st.step += 1
        b1, b2 = st.betas
        bc1 = 1.0 - b1 ** st.step
        bc2 = 1.0 - b2 ** st.step
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                continue
            m = st.exp_avg[i]
            v = st.exp_avg_sq[i]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            if st.weight_decay:
                p.data *= 1.0 - st.lr * st.weight_decay
            p.data -= (st.lr * (m / bc1) / (np.sqrt(v / bc2) + st.eps)).astype(p.dtype)
