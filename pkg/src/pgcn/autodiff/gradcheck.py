"""Central finite-difference verification of reverse-mode gradients."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from pgcn.autodiff.tensor import Tensor


@dataclass
class ProbeResult:
    name: str
    index: tuple[int, ...]
    analytic: float
    numeric: float
    ok: bool

    @property
    def abs_err(self) -> float:
        return abs(self.analytic - self.numeric)


def within(analytic: float, numeric: float, rtol: float = 1e-2, atol: float = 1e-3) -> bool:
    return abs(analytic - numeric) <= max(rtol * max(abs(analytic), abs(numeric)), atol)


def numeric_grad(fn: Callable[[], Tensor], t: Tensor, index: tuple[int, ...], step: float = 1e-3) -> float:
    orig = t.data[index].copy()
    t.data[index] = orig + step
    fp = float(fn().data)
    t.data[index] = orig - step
    fm = float(fn().data)
    t.data[index] = orig
    return (fp - fm) / (2 * step)


def check_gradients(
    fn: Callable[[], Tensor],
    tensors: Sequence[tuple[str, Tensor]],
    rng: np.random.Generator,
    probes: int = 3,
    step: float = 1e-3,
    rtol: float = 1e-2,
    atol: float = 1e-3,
) -> list[ProbeResult]:
    """Compare backward() against central differences at random entries.

    ``fn`` must rebuild the scalar loss from scratch on every call.
    """
    for _, t in tensors:
        t.grad = None
    fn().backward()
    analytic = {name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data)) for name, t in tensors}
    results = []
    for name, t in tensors:
        flat = rng.choice(t.size, size=min(probes, t.size), replace=False)
        for f in flat:
            idx = tuple(int(i) for i in np.unravel_index(int(f), t.shape))
            a = float(analytic[name][idx])
            n = numeric_grad(fn, t, idx, step)
            results.append(ProbeResult(name, idx, a, n, within(a, n, rtol, atol)))
    return results
