"""Small dense-network building blocks shared by the recommenders."""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class Linear:
    def __init__(self, fan_in: int, fan_out: int, rng: np.random.Generator,
                 name: str = "linear", weight: np.ndarray | None = None,
                 bias: np.ndarray | None = None):
        dt = ad.default_dtype()
        if weight is None:
            weight = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=(fan_in, fan_out))
            bias = np.zeros(fan_out)
        self.w = Tensor(np.asarray(weight, dtype=dt), requires_grad=True, name=f"{name}.w")
        self.b = Tensor(np.asarray(bias, dtype=dt), requires_grad=True, name=f"{name}.b")

    def __call__(self, x: Tensor) -> Tensor:
        return ad.add(ad.matmul(x, self.w), self.b)

    def params(self) -> list[Tensor]:
        return [self.w, self.b]


class Mlp:
    """ReLU tower with a linear head; dropout (when enabled) applies to the
    hidden activations only."""

    def __init__(self, fan_in: int, hidden: list[int], fan_out: int,
                 rng: np.random.Generator, name: str = "mlp", dropout: float = 0.0):
        self.layers: list[Linear] = []
        self.dropout = dropout
        prev = fan_in
        for i, h in enumerate(hidden):
            self.layers.append(Linear(prev, h, rng, name=f"{name}.{i}"))
            prev = h
        self.head = Linear(prev, fan_out, rng, name=f"{name}.head")

    def __call__(self, x: Tensor, rng: np.random.Generator | None = None,
                 training: bool = False) -> Tensor:
        for layer in self.layers:
            x = ad.relu(layer(x))
            if training and self.dropout > 0.0 and rng is not None:
                x = ad.dropout(x, self.dropout, rng, training=True)
        return self.head(x)

    def params(self) -> list[Tensor]:
        out = []
        for layer in self.layers:
            out.extend(layer.params())
        out.extend(self.head.params())
        return out


def l2_penalty(params: list[Tensor], lam: float) -> Tensor:
    """lam * sum of squared entries over every tensor in `params`."""
    total = ad.constant(0.0)
    for p in params:
        total = ad.add(total, ad.tsum(ad.mul(p, p)))
    return ad.mul(total, lam)


def params_state(params: list[Tensor], prefix: str) -> dict[str, np.ndarray]:
    return {f"{prefix}.{i}": p.data for i, p in enumerate(params)}


def load_params_state(params: list[Tensor], arrays: dict[str, np.ndarray], prefix: str) -> None:
    for i, p in enumerate(params):
        p.assign(arrays[f"{prefix}.{i}"])
