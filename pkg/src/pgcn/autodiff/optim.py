from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from pgcn.autodiff.nn import Parameter
from pgcn.errors import NumericHealthError


@dataclass
class OptimizerState:
    learning_rate: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


class Adam:
    """Adam with bias correction over a fixed, named parameter list.

    Missing gradients count as zero.  A non-finite gradient aborts the whole
    step before any parameter is touched.
    """

    def __init__(self, named_params: Sequence[tuple[str, Parameter]], learning_rate: float = 1e-4):
        if learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        self.names = [n for n, _ in named_params]
        self.params = [p for _, p in named_params]
        self.state = OptimizerState(
            learning_rate=learning_rate,
            m=[np.zeros_like(p.data) for p in self.params],
            v=[np.zeros_like(p.data) for p in self.params],
        )

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        grads = []
        for name, p in zip(self.names, self.params):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if g.shape != p.shape:
                raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
            if not np.all(np.isfinite(g)):
                raise NumericHealthError(f"non-finite gradient for parameter {name!r}")
            grads.append(g)
        st = self.state
        st.step += 1
        b1, b2 = st.beta1, st.beta2
        c1 = 1.0 - b1**st.step
        c2 = 1.0 - b2**st.step
        for p, g, m, v in zip(self.params, grads, st.m, st.v):
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            update = st.learning_rate * (m / c1) / (np.sqrt(v / c2) + st.eps)
            p.data -= update.astype(p.data.dtype)
