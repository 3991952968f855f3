"""Parameterized building blocks: linear, conv, and normalization layers.

Layers hold :class:`~bevssm.autodiff.Parameter` leaves and compose the
primitives from :mod:`bevssm.ops`; none of them define bespoke backward
rules.  ``Module.named_params`` walks attributes in insertion order, so
checkpoint keys are stable across runs of the same build.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Parameter
from .errors import ConfigError
from . import ops


def make_rng(rng) -> np.random.Generator:
    """Pass through Generators, otherwise seed a fresh PCG64 stream."""
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


class Module:
    """Minimal parameter container with recursive discovery."""

    def named_params(self, prefix: str = "") -> list[tuple[str, Parameter]]:
        found: list[tuple[str, Parameter]] = []
        for attr, value in vars(self).items():
            path = f"{prefix}{attr}"
            if isinstance(value, Parameter):
                found.append((path, value))
            elif isinstance(value, Module):
                found.extend(value.named_params(prefix=path + "."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        found.extend(item.named_params(prefix=f"{path}.{i}."))
                    elif isinstance(item, Parameter):
                        found.append((f"{path}.{i}", item))
        return found

    def params(self) -> list[Parameter]:
        return [p for _, p in self.named_params()]

    def named_buffers(self, prefix: str = "") -> list[tuple[str, np.ndarray]]:
        """Non-learned state (running statistics), walked like named_params."""
        found: list[tuple[str, np.ndarray]] = []
        for attr, value in vars(self).items():
            path = f"{prefix}{attr}"
            if isinstance(value, np.ndarray) and attr.startswith("running_"):
                found.append((path, value))
            elif isinstance(value, Module):
                found.extend(value.named_buffers(prefix=path + "."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        found.extend(item.named_buffers(prefix=f"{path}.{i}."))
        return found


class Linear(Module):
    """Affine map on the last axis; weight stored input-major as (in, out)."""

    def __init__(self, in_features: int, out_features: int, bias: bool = True,
                 rng=None, dtype=np.float32):
        rng = make_rng(rng)
        bound = 1.0 / np.sqrt(in_features)
        self.weight = Parameter(
            rng.uniform(-bound, bound, (in_features, out_features)), dtype=dtype)
        self.bias = Parameter(rng.uniform(-bound, bound, out_features),
                              dtype=dtype) if bias else None

    def __call__(self, x):
        y = ops.matmul(x, self.weight)
        if self.bias is not None:
            y = ops.add(y, self.bias)
        return y


class Conv2d(Module):
    """Square 2-d convolution layer over (H, W, C) feature maps."""

    def __init__(self, kernel_size: int, in_channels: int, out_channels: int,
                 bias: bool = False, stride: int = 1, rng=None, dtype=np.float32):
        rng = make_rng(rng)
        fan_in = kernel_size * kernel_size * in_channels
        bound = 1.0 / np.sqrt(fan_in)
        self.weight = Parameter(
            rng.uniform(-bound, bound,
                        (kernel_size, kernel_size, in_channels, out_channels)),
            dtype=dtype)
        self.bias = Parameter(rng.uniform(-bound, bound, out_channels),
                              dtype=dtype) if bias else None
        self.stride = stride

    def __call__(self, x):
        return ops.conv2d(x, self.weight, bias=self.bias, stride=self.stride)


class BatchNorm2d(Module):
    """Batch normalization over all axes but the channel (last) axis.

    Training mode normalizes with batch statistics and folds them into the
    running estimates (momentum convention: new = (1-m)*old + m*batch, with
    the unbiased variance entering the running estimate).  Eval mode uses the
    stored running statistics as constants.
    """

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5,
                 dtype=np.float32):
        if not 0.0 < momentum <= 1.0:
            raise ConfigError(f"momentum must be in (0, 1], got {momentum}")
        self.gamma = Parameter(np.ones(channels), dtype=dtype)
        self.beta = Parameter(np.zeros(channels), dtype=dtype)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.momentum = momentum
        self.eps = eps

    def __call__(self, x, train: bool):
        axes = tuple(range(x.ndim - 1))
        if train:
            bm = ops.mean_(x, axis=axes, keepdims=True)
            xc = ops.sub(x, bm)
            bv = ops.mean_(ops.mul(xc, xc), axis=axes, keepdims=True)
            inv = ops.div(1.0, ops.sqrt(ops.add(bv, self.eps)))
            y = ops.add(ops.mul(ops.mul(xc, inv), self.gamma), self.beta)

            n = int(np.prod([x.shape[a] for a in axes]))
            mean_b = bm.data.reshape(-1)
            var_b = bv.data.reshape(-1)
            if n > 1:
                var_b = var_b * (n / (n - 1))
            m = self.momentum
            self.running_mean = ((1 - m) * self.running_mean + m * mean_b).astype(
                self.running_mean.dtype)
            self.running_var = ((1 - m) * self.running_var + m * var_b).astype(
                self.running_var.dtype)
            return y
        xc = ops.sub(x, self.running_mean)
        inv = 1.0 / np.sqrt(self.running_var + self.eps)
        return ops.add(ops.mul(ops.mul(xc, inv), self.gamma), self.beta)


class LayerNorm(Module):
    """Per-position normalization over the channel (last) axis."""

    def __init__(self, channels: int, eps: float = 1e-5, dtype=np.float32):
        self.gamma = Parameter(np.ones(channels), dtype=dtype)
        self.beta = Parameter(np.zeros(channels), dtype=dtype)
        self.eps = eps

    def __call__(self, x):
        return ops.layer_norm(x, self.gamma, self.beta, eps=self.eps)
