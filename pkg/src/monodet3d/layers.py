"""Parameterized building blocks on top of the autodiff engine."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class Conv2d:
    """3x3/1x1 convolution with bias."""

    def __init__(self, rng: np.random.Generator, cin: int, cout: int, k: int,
                 stride: int = 1, padding: int = 0):
        std = np.sqrt(2.0 / (cin * k * k))
        self.w = Tensor(rng.normal(0.0, std, size=(cout, cin, k, k)), requires_grad=True)
        self.b = Tensor(np.zeros(cout), requires_grad=True)
        self.stride = stride
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        y = ad.conv2d(x, self.w, self.stride, self.padding)
        return ad.add(y, ad.reshape(self.b, (-1, 1, 1)))

    def params(self, prefix: str) -> dict:
        return {f"{prefix}.w": self.w, f"{prefix}.b": self.b}


class Linear:
    def __init__(self, rng: np.random.Generator, cin: int, cout: int, bias_init: float = 0.0):
        std = np.sqrt(1.0 / cin)
        self.w = Tensor(rng.normal(0.0, std, size=(cin, cout)), requires_grad=True)
        self.b = Tensor(np.full(cout, bias_init), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.add(ad.matmul(x, self.w), self.b)

    def params(self, prefix: str) -> dict:
        return {f"{prefix}.w": self.w, f"{prefix}.b": self.b}


class MLP:
    """Stack of linear layers with relu between them (none after the last)."""

    def __init__(self, rng: np.random.Generator, dims: list[int], bias_init_last: float = 0.0):
        self.layers = []
        for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
            last = i == len(dims) - 2
            self.layers.append(Linear(rng, a, b, bias_init=bias_init_last if last else 0.0))

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = ad.relu(x)
        return x

    def params(self, prefix: str) -> dict:
        out = {}
        for i, layer in enumerate(self.layers):
            out.update(layer.params(f"{prefix}.{i}"))
        return out


class LayerNorm:
    def __init__(self, c: int):
        self.gain = Tensor(np.ones(c), requires_grad=True)
        self.bias = Tensor(np.zeros(c), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.gain, self.bias)

    def params(self, prefix: str) -> dict:
        return {f"{prefix}.gain": self.gain, f"{prefix}.bias": self.bias}
