"""Stateful layers over the op vocabulary, plus the module container base.

Parameter traversal follows attribute insertion order depth first, so the
flattened parameter list (and with it checkpoint layout and SGD update order)
is identical across runs.
"""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import ops
from .autodiff import Parameter, Tensor
from .errors import ContractError


class Module:
    """Base container: child modules and parameters found by attribute scan."""

    training: bool = True

    def forward(self, x: Tensor) -> Tensor:
        raise NotImplementedError

    def __call__(self, *args, **kwargs) -> Tensor:
        return self.forward(*args, **kwargs)

    def _children(self) -> Iterator[tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in vars(self).items():
            if isinstance(value, Parameter):
                yield (f"{prefix}{name}", value)
        for name, child in self._children():
            yield from child.named_parameters(prefix=f"{prefix}{name}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        """Non-trainable state (e.g. batch-norm running statistics)."""
        for name in getattr(self, "_buffer_names", ()):
            yield (f"{prefix}{name}", getattr(self, name))
        for name, child in self._children():
            yield from child.named_buffers(prefix=f"{prefix}{name}.")

    def train(self, flag: bool = True) -> "Module":
        self.training = flag
        for _, child in self._children():
            child.train(flag)
        return self

    def eval(self) -> "Module":
        return self.train(False)


def he_normal(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int,
              dtype=np.float32) -> np.ndarray:
    """Zero-mean Gaussian with variance 2/fan_in."""
    if fan_in < 1:
        raise ContractError(f"he_normal: fan_in must be >= 1, got {fan_in}")
    std = np.sqrt(2.0 / fan_in)
    return (rng.standard_normal(shape) * std).astype(dtype)


class Conv2d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel: int,
                 stride: int = 1, padding: int = 0, bias: bool = True,
                 rng: np.random.Generator | None = None, dtype=np.float32):
        if rng is None:
            rng = np.random.default_rng(0)
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = int(kernel)
        self.stride = int(stride)
        self.padding = int(padding)
        fan_in = in_channels * self.kernel * self.kernel
        self.weight = Parameter(
            he_normal(rng, (out_channels, in_channels, self.kernel, self.kernel), fan_in, dtype),
            name="weight")
        self.bias = Parameter(np.zeros((1, out_channels, 1, 1), dtype=dtype), name="bias") \
            if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, bias: bool = True,
                 rng: np.random.Generator | None = None, dtype=np.float32):
        if rng is None:
            rng = np.random.default_rng(0)
        self.in_features = in_features
        self.out_features = out_features
        self.weight = Parameter(
            he_normal(rng, (out_features, in_features, 1, 1), in_features, dtype),
            name="weight")
        self.bias = Parameter(np.zeros((1, out_features, 1, 1), dtype=dtype), name="bias") \
            if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ops.linear(x, self.weight, self.bias)


class BatchNorm2d(Module):
    _buffer_names = ("running_mean", "running_var")

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5,
                 dtype=np.float32):
        self.channels = channels
        self.momentum = float(momentum)
        self.eps = float(eps)
        self.gamma = Parameter(np.ones((1, channels, 1, 1), dtype=dtype), name="gamma")
        self.beta = Parameter(np.zeros((1, channels, 1, 1), dtype=dtype), name="beta")
        self.running_mean = np.zeros((1, channels, 1, 1), dtype=dtype)
        self.running_var = np.ones((1, channels, 1, 1), dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return ops.batchnorm2d(x, self.gamma, self.beta,
                               self.running_mean, self.running_var,
                               momentum=self.momentum, eps=self.eps,
                               training=self.training)


class Identity(Module):
    """Stand-in for batch norm when normalization is disabled."""

    def forward(self, x: Tensor) -> Tensor:
        return x


def make_norm(channels: int, use_batchnorm: bool, dtype=np.float32) -> Module:
    return BatchNorm2d(channels, dtype=dtype) if use_batchnorm else Identity()
