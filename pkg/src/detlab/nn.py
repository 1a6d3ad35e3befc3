"""Minimal module system: named, partitioned parameters plus persistent
buffers (normalization statistics). Construction allocates zeroed storage;
``assign_names`` walks the tree to give every parameter its dotted path and
``initialize`` then fills values from streams keyed by (seed, name), so
identical specs and seeds always produce identical weights regardless of
build order.
"""

from __future__ import annotations

import numpy as np

from . import ops
from .rng import stream
from .tensor import Parameter, Tensor


class Module:
    def __init__(self):
        self._params: dict[str, Parameter] = {}
        self._buffers: dict[str, Tensor] = {}
        self._children: dict[str, Module] = {}

    def __setattr__(self, key, value):
        if isinstance(value, Module):
            self.__dict__.setdefault("_children", {})[key] = value
        elif isinstance(value, Parameter):
            self.__dict__.setdefault("_params", {})[key] = value
        object.__setattr__(self, key, value)

    def add_buffer(self, key, array):
        t = Tensor(array)
        self._buffers[key] = t
        object.__setattr__(self, key, t)
        return t

    def named_parameters(self, prefix=""):
        for key, p in self._params.items():
            yield (f"{prefix}{key}", p)
        for key, child in self._children.items():
            yield from child.named_parameters(prefix=f"{prefix}{key}.")

    def named_buffers(self, prefix=""):
        for key, b in self._buffers.items():
            yield (f"{prefix}{key}", b)
        for key, child in self._children.items():
            yield from child.named_buffers(prefix=f"{prefix}{key}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def assign_names(self, prefix=""):
        for name, p in self.named_parameters(prefix):
            p.name = name

    def initialize(self, seed, prefix="", only=None):
        """Fill parameter values from streams keyed by (seed, dotted name).

        ``only`` optionally filters by full name, which lets late-added
        submodules (adapters) initialize without disturbing the rest.
        """
        for key, p in self._params.items():
            name = f"{prefix}{key}"
            if only is not None and not only(name):
                continue
            rng = stream(seed, "init", name)
            p.data[...] = self._init_value(key, p, rng)
        for key, child in self._children.items():
            child.initialize(seed, prefix=f"{prefix}{key}.", only=only)

    def _init_value(self, key, p, rng):
        if p.ndim == 4:  # conv weight: He normal, fan-in
            fan_in = p.shape[1] * p.shape[2] * p.shape[3]
            return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=p.shape)
        if p.ndim == 2:  # linear weight
            return rng.normal(0.0, np.sqrt(2.0 / p.shape[1]), size=p.shape)
        if key == "gamma":
            return np.ones(p.shape)
        return np.zeros(p.shape)  # biases, beta


class Conv2d(Module):
    def __init__(self, cin, cout, kernel, partition, stride=1, padding=None, bias=True,
                 init="he", bias_const=0.0):
        super().__init__()
        self.stride = stride
        self.padding = kernel // 2 if padding is None else padding
        self.init = init
        self.bias_const = bias_const
        self.weight = Parameter(np.zeros((cout, cin, kernel, kernel), dtype=np.float32), partition)
        self.bias = Parameter(np.zeros(cout, dtype=np.float32), partition) if bias else None

    def _init_value(self, key, p, rng):
        if key == "weight":
            if self.init == "zero":
                return np.zeros(p.shape)
            return super()._init_value(key, p, rng)
        return np.full(p.shape, self.bias_const)

    def __call__(self, x):
        return ops.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class BatchNorm2d(Module):
    """Batch norm whose mode (train_stats / frozen_stats) is set externally."""

    def __init__(self, c, partition, eps=1e-5, momentum=0.1):
        super().__init__()
        self.eps = eps
        self.momentum = momentum
        self.mode = "train_stats"
        self.gamma = Parameter(np.ones(c, dtype=np.float32), partition)
        self.beta = Parameter(np.zeros(c, dtype=np.float32), partition)
        self.add_buffer("running_mean", np.zeros(c, dtype=np.float32))
        self.add_buffer("running_var", np.ones(c, dtype=np.float32))

    def __call__(self, x):
        return ops.batch_norm(
            x, self.gamma, self.beta, self.running_mean, self.running_var,
            mode=self.mode, eps=self.eps, momentum=self.momentum,
        )


class Linear(Module):
    def __init__(self, d_in, d_out, partition, bias=True):
        super().__init__()
        self.weight = Parameter(np.zeros((d_out, d_in), dtype=np.float32), partition)
        self.bias = Parameter(np.zeros(d_out, dtype=np.float32), partition) if bias else None

    def __call__(self, x):
        return ops.linear(x, self.weight, self.bias)


def set_bn_mode(module, mode):
    """Set the statistics mode of every BatchNorm2d in a module tree."""
    if isinstance(module, BatchNorm2d):
        module.mode = mode
    for child in module._children.values():
        set_bn_mode(child, mode)


def cast_model(module, dtype):
    """Convert all parameters and buffers to the given float dtype in place."""
    for _, p in module.named_parameters():
        p.data = p.data.astype(dtype)
    for _, b in module.named_buffers():
        b.data = b.data.astype(dtype)
