"""Parameter containers and the handful of layers the networks are built from."""
from __future__ import annotations

from typing import Iterator

import numpy as np

from pgcn.autodiff import functional as F
from pgcn.autodiff.tensor import DTYPE, Tensor


class Parameter(Tensor):
    __slots__ = ()

    def __init__(self, data, name: str | None = None):
        super().__init__(data, requires_grad=True, name=name)


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) resampled until every value lies within two std."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out.astype(DTYPE)


def he_normal(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return (rng.normal(0.0, 1.0, size=shape) * np.sqrt(2.0 / fan_in)).astype(DTYPE)


class Module:
    """Attribute-walking container: Parameters, buffers (plain Tensors) and sub-modules.

    Lists and tuples of modules are traversed with their index as the name.
    A parameter reachable through two paths (weight sharing) is reported once,
    under the first path found.
    """

    training: bool = True

    def _children(self) -> Iterator[tuple[str, object]]:
        for key, value in vars(self).items():
            if key.startswith("_"):
                continue
            if isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    yield f"{key}.{i}", item
            else:
                yield key, value

    def _walk(self, prefix: str, seen: set[int]) -> Iterator[tuple[str, object]]:
        for name, value in self._children():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor):
                if id(value) not in seen:
                    seen.add(id(value))
                    yield full, value
            elif isinstance(value, Module):
                yield from value._walk(full + ".", seen)

    def named_parameters(self) -> list[tuple[str, Parameter]]:
        return [(n, t) for n, t in self._walk("", set()) if isinstance(t, Parameter)]

    def named_buffers(self) -> list[tuple[str, Tensor]]:
        return [(n, t) for n, t in self._walk("", set()) if not isinstance(t, Parameter)]

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, value in self._children():
            if isinstance(value, Module):
                yield from value.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = np.zeros_like(p.data)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: t.data for n, t in self._walk("", set())}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self._walk("", set()))
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={missing} unexpected={unexpected}")
        for name, t in own.items():
            arr = np.asarray(state[name], dtype=DTYPE)
            if arr.shape != t.shape:
                raise ValueError(f"{name}: expected shape {t.shape}, got {arr.shape}")
            t.data[...] = arr

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Linear(Module):
    def __init__(self, rng: np.random.Generator, fan_in: int, fan_out: int, bias: bool = True):
        self.weight = Parameter(trunc_normal(rng, (fan_in, fan_out)))
        self.bias = Parameter(np.zeros(fan_out, dtype=DTYPE)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return F.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int):
        self.weight = Parameter(np.ones(dim, dtype=DTYPE))
        self.bias = Parameter(np.zeros(dim, dtype=DTYPE))

    def forward(self, x: Tensor) -> Tensor:
        return F.layer_norm(x, self.weight, self.bias)


class BatchNorm2d(Module):
    def __init__(self, channels: int, momentum: float = 0.1):
        self.weight = Parameter(np.ones(channels, dtype=DTYPE))
        self.bias = Parameter(np.zeros(channels, dtype=DTYPE))
        self.running_mean = Tensor(np.zeros(channels, dtype=DTYPE))
        self.running_var = Tensor(np.ones(channels, dtype=DTYPE))
        self.momentum = momentum

    def forward(self, x: Tensor) -> Tensor:
        return F.batch_norm(x, self.weight, self.bias, self.running_mean.data,
                            self.running_var.data, self.training, self.momentum)


class Conv2d(Module):
    def __init__(self, rng: np.random.Generator, cin: int, cout: int, kernel: int,
                 stride: int = 1, padding: int = 0, bias: bool = True):
        fan_in = cin * kernel * kernel
        self.weight = Parameter(he_normal(rng, (cout, cin, kernel, kernel), fan_in))
        self.bias = Parameter(np.zeros(cout, dtype=DTYPE)) if bias else None
        self.stride = stride
        self.padding = padding

    def forward(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.bias, self.stride, self.padding)
