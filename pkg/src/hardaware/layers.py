"""Parameterized layers on top of the tensor ops.

Layers own their parameter tensors and any non-differentiable state
(batchnorm running statistics, dropout RNG). Construction is deterministic
given an explicit ``numpy`` Generator: convolution and linear weights draw
from N(0, 2/fan_in) (He initialization), batchnorm starts at gamma=1,
beta=0.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .tensor import Tensor


class Layer:
    training: bool = True

    def params(self) -> list[tuple[str, Tensor]]:
        return []

    def train(self) -> None:
        self.training = True

    def eval(self) -> None:
        self.training = False

    def forward(self, x: Tensor) -> Tensor:
        raise NotImplementedError

    def __call__(self, x: Tensor) -> Tensor:
        return self.forward(x)


def _he_init(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


class Linear(Layer):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator):
        self.w = Tensor(_he_init(rng, (in_features, out_features), in_features), requires_grad=True)
        self.b = Tensor(np.zeros(out_features), requires_grad=True)

    def params(self):
        return [("w", self.w), ("b", self.b)]

    def forward(self, x: Tensor) -> Tensor:
        return T.linear(x, self.w, self.b)


class Conv2d(Layer):
    def __init__(self, in_ch: int, out_ch: int, kernel: int, rng: np.random.Generator,
                 stride: int = 1, padding: int = 0):
        fan_in = in_ch * kernel * kernel
        self.w = Tensor(_he_init(rng, (out_ch, in_ch, kernel, kernel), fan_in), requires_grad=True)
        self.b = Tensor(np.zeros(out_ch), requires_grad=True)
        self.stride = stride
        self.padding = padding

    def params(self):
        return [("w", self.w), ("b", self.b)]

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.w, self.b, stride=self.stride, padding=self.padding)


class ConvTranspose2d(Layer):
    def __init__(self, in_ch: int, out_ch: int, kernel: int, rng: np.random.Generator,
                 stride: int = 1, padding: int = 0):
        fan_in = in_ch * kernel * kernel
        self.w = Tensor(_he_init(rng, (in_ch, out_ch, kernel, kernel), fan_in), requires_grad=True)
        self.b = Tensor(np.zeros(out_ch), requires_grad=True)
        self.stride = stride
        self.padding = padding

    def params(self):
        return [("w", self.w), ("b", self.b)]

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d_transposed(x, self.w, self.b, stride=self.stride, padding=self.padding)


class BatchNorm2d(Layer):
    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1):
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.eps = eps
        self.momentum = momentum

    def params(self):
        return [("gamma", self.gamma), ("beta", self.beta)]

    def buffers(self) -> list[tuple[str, np.ndarray]]:
        return [("running_mean", self.running_mean), ("running_var", self.running_var)]

    def forward(self, x: Tensor) -> Tensor:
        return T.batchnorm2d(
            x, self.gamma, self.beta, self.running_mean, self.running_var,
            eps=self.eps, momentum=self.momentum, training=self.training,
        )


class Activation(Layer):
    def __init__(self, kind: str, alpha: float = 0.2):
        self.kind = kind
        self.alpha = alpha

    def forward(self, x: Tensor) -> Tensor:
        return T.activation(x, self.kind, self.alpha)


class AvgPool2d(Layer):
    def __init__(self, k: int = 2):
        self.k = k

    def forward(self, x: Tensor) -> Tensor:
        return T.avgpool2d(x, self.k)


class GlobalAvgPool(Layer):
    def forward(self, x: Tensor) -> Tensor:
        return T.global_avgpool(x)


class Flatten(Layer):
    def forward(self, x: Tensor) -> Tensor:
        return T.flatten(x)


class Dropout(Layer):
    """Inverted dropout; reseed via ``reset_rng`` for reproducible runs."""

    def __init__(self, p: float, seed: int = 0):
        if not 0.0 <= p < 1.0:
            raise ConfigError(f"dropout probability must be in [0, 1), got {p}")
        self.p = p
        self.rng = np.random.default_rng(seed)

    def reset_rng(self, seed: int) -> None:
        self.rng = np.random.default_rng(seed)

    def forward(self, x: Tensor) -> Tensor:
        return T.dropout(x, self.p, rng=self.rng, training=self.training)


class Sequential(Layer):
    def __init__(self, *layers: Layer):
        self.layers = list(layers)

    def params(self):
        out = []
        for i, layer in enumerate(self.layers):
            out.extend((f"{i}.{name}", p) for name, p in layer.params())
        return out

    def buffers(self):
        out = []
        for i, layer in enumerate(self.layers):
            if hasattr(layer, "buffers"):
                out.extend((f"{i}.{name}", b) for name, b in layer.buffers())
        return out

    def train(self):
        self.training = True
        for layer in self.layers:
            layer.train()

    def eval(self):
        self.training = False
        for layer in self.layers:
            layer.eval()

    def forward(self, x: Tensor) -> Tensor:
        for layer in self.layers:
            x = layer(x)
        return x


def named_parameters(module: Layer, prefix: str = "") -> list[tuple[str, Tensor]]:
    return [(f"{prefix}{name}" if prefix else name, p) for name, p in module.params()]


def parameter_count(module: Layer) -> int:
    return sum(p.size for _, p in module.params())


def zero_grads(params: list[tuple[str, Tensor]]) -> None:
    for _, p in params:
        p.zero_grad()


def grad_norm(params: list[tuple[str, Tensor]]) -> float:
    total = 0.0
    for _, p in params:
        if p.grad is not None:
            total += float(np.sum(p.grad * p.grad))
    return float(np.sqrt(total))
