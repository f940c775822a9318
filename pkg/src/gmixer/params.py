"""Learnable parameters, the ordered registry that owns them, and Adam."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from gmixer.tensor import Tensor


@dataclass(eq=False)
class Parameter:
    name: str
    value: Tensor
    grad: np.ndarray
    adam_m: np.ndarray
    adam_v: np.ndarray
    step_count: int = 0

    @classmethod
    def from_array(cls, name: str, data: np.ndarray) -> "Parameter":
        data = np.array(data)
        p = cls(name, None, np.zeros_like(data), np.zeros_like(data), np.zeros_like(data))
        p.set_value(data)
        return p

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def data(self) -> np.ndarray:
        return self.value.data

    def set_value(self, data: np.ndarray) -> None:
        data = np.asarray(data, dtype=self.grad.dtype)
        if data.shape != self.grad.shape:
            raise ValueError(f"{self.name}: new value shape {data.shape} != {self.grad.shape}")
        self.value = Tensor(data.copy(), requires_grad=True, param=self)

    def zero_grad(self) -> None:
        self.grad[...] = 0.0


@dataclass
class ParamRegistry:
    """Insertion-ordered collection of uniquely named parameters.

    All random initialisation draws from one generator seeded with ``rng_seed``,
    so an identical construction sequence yields identical values.
    """

    rng_seed: int = 0
    dtype: type = np.float64
    _params: dict[str, Parameter] = field(default_factory=dict)

    def __post_init__(self):
        self.rng = np.random.default_rng(self.rng_seed)

    def __iter__(self) -> Iterator[Parameter]:
        return iter(self._params.values())

    def __len__(self) -> int:
        return len(self._params)

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self) -> list[str]:
        return list(self._params)

    def add(self, name: str, shape, init: str = "glorot") -> Parameter:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        shape = tuple(int(s) for s in shape)
        if init == "glorot":
            fan_in, fan_out = shape[0], shape[-1]
            limit = math.sqrt(6.0 / (fan_in + fan_out))
            data = self.rng.uniform(-limit, limit, size=shape)
        elif init == "zeros":
            data = np.zeros(shape)
        elif init == "ones":
            data = np.ones(shape)
        elif init == "normal":
            data = self.rng.standard_normal(shape)
        else:
            raise ValueError(f"unknown init {init!r}")
        p = Parameter.from_array(name, data.astype(self.dtype))
        self._params[name] = p
        return p

    def attach(self, param: Parameter) -> Parameter:
        if param.name in self._params:
            raise KeyError(f"duplicate parameter name {param.name!r}")
        self._params[param.name] = param
        return param

    def zero_grad(self) -> None:
        for p in self:
            p.zero_grad()

    def grad_norm(self) -> float:
        return math.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in self))

    def value_norms(self) -> dict[str, float]:
        return {p.name: float(np.linalg.norm(p.data)) for p in self}

    def num_values(self) -> int:
        return sum(p.grad.size for p in self)

    def snapshot(self) -> dict[str, np.ndarray]:
        return {p.name: p.data.copy() for p in self}

    def load(self, values: dict[str, np.ndarray]) -> None:
        missing = set(self._params) - set(values)
        extra = set(values) - set(self._params)
        if missing or extra:
            raise KeyError(f"parameter mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, p in self._params.items():
            p.set_value(values[name])


def clip_grad_norm(registry: ParamRegistry, max_norm: float) -> float:
    """Rescale all gradients so their global L2 norm is at most ``max_norm``."""
    norm = registry.grad_norm()
    if norm > max_norm > 0:
        factor = max_norm / (norm + 1e-12)
        for p in registry:
            p.grad *= factor
    return norm


def adam_step(registry: ParamRegistry, lr: float = 1e-3, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One bias-corrected Adam update on every parameter, then zero the grads."""
    for p in registry:
        g = p.grad
        p.step_count += 1
        t = p.step_count
        p.adam_m *= beta1
        p.adam_m += (1.0 - beta1) * g
        p.adam_v *= beta2
        p.adam_v += (1.0 - beta2) * g * g
        m_hat = p.adam_m / (1.0 - beta1 ** t)
        v_hat = p.adam_v / (1.0 - beta2 ** t)
        p.set_value(p.data - lr * m_hat / (np.sqrt(v_hat) + eps))
        p.zero_grad()
