"""Lightweight layer containers with stable dotted parameter paths.

Attributes assigned a Parameter or Module are auto-registered, so
``named_parameters`` yields deterministic names like
``enc_blocks.0.tfc.layers.1.conv.kernels`` in construction order. These
paths are the checkpoint manifest keys, so keep attribute names stable.
"""

from __future__ import annotations

import numpy as np

from .numerics import ops
from .numerics.ops import RunningStats
from .numerics.tensor import Parameter, Tensor


def he_uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    limit = float(np.sqrt(6.0 / max(1, fan_in)))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class Module:
    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_modules", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self.__dict__["_params"][name] = value
        elif isinstance(value, Module):
            self.__dict__["_modules"][name] = value
        else:
            object.__setattr__(self, name, value)

    def __getattr__(self, name):
        for bag in ("_params", "_modules", "_buffers"):
            d = self.__dict__.get(bag)
            if d is not None and name in d:
                return d[name]
        raise AttributeError(f"{type(self).__name__} has no attribute {name!r}")

    def register_buffer(self, name: str, array: np.ndarray):
        self.__dict__["_buffers"][name] = array

    def modules(self):
        yield self
        for m in self._modules.values():
            yield from m.modules()

    def named_parameters(self, prefix: str = ""):
        for name, p in self._params.items():
            yield (prefix + name, p)
        for name, m in self._modules.items():
            yield from m.named_parameters(prefix + name + ".")

    def parameters(self):
        for _, p in self.named_parameters():
            yield p

    def named_buffers(self, prefix: str = ""):
        for name, b in self._buffers.items():
            yield (prefix + name, b)
        for name, m in self._modules.items():
            yield from m.named_buffers(prefix + name + ".")

    def train(self, mode: bool = True):
        for m in self.modules():
            object.__setattr__(m, "training", mode)
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):  # pragma: no cover - abstract
        raise NotImplementedError


class ModuleList(Module):
    def __init__(self, modules=()):
        super().__init__()
        for m in modules:
            self.append(m)

    def append(self, module: Module):
        self.__dict__["_modules"][str(len(self._modules))] = module

    def __getitem__(self, idx: int) -> Module:
        return self._modules[str(idx % len(self._modules) if idx < 0 else idx)]

    def __setitem__(self, idx: int, module: Module):
        key = str(idx % len(self._modules) if idx < 0 else idx)
        if key not in self._modules:
            raise IndexError(key)
        self.__dict__["_modules"][key] = module

    def __len__(self) -> int:
        return len(self._modules)

    def __iter__(self):
        return iter(self._modules.values())


class Linear(Module):
    def __init__(self, in_features: int, out_features: int,
                 rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        self.weight = Parameter(he_uniform(rng, (in_features, out_features),
                                           in_features, dtype))
        self.bias = Parameter(np.zeros(out_features, dtype=dtype))

    def forward(self, x):
        return ops.linear(x, self.weight, self.bias)


class Conv2d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel,
                 rng: np.random.Generator, stride=(1, 1), padding=(0, 0),
                 dtype=np.float32):
        super().__init__()
        kF, kT = kernel
        self.stride = tuple(stride)
        self.padding = tuple(padding)
        fan_in = in_channels * kF * kT
        self.kernels = Parameter(he_uniform(
            rng, (out_channels, in_channels, kF, kT), fan_in, dtype))
        self.bias = Parameter(np.zeros(out_channels, dtype=dtype))

    def forward(self, x):
        return ops.conv2d(x, self.kernels, self.bias, self.stride, self.padding)


class ConvTranspose2d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel,
                 rng: np.random.Generator, stride=(1, 1), dtype=np.float32):
        super().__init__()
        kF, kT = kernel
        self.stride = tuple(stride)
        fan_in = in_channels * kF * kT
        self.kernels = Parameter(he_uniform(
            rng, (in_channels, out_channels, kF, kT), fan_in, dtype))
        self.bias = Parameter(np.zeros(out_channels, dtype=dtype))

    def forward(self, x):
        return ops.transposed_conv2d(x, self.kernels, self.bias, self.stride)


class BatchNorm(Module):
    """Batch normalization over one feature axis.

    axis=-3 normalizes the channel axis of [*, C, F, T] maps; axis=-1
    normalizes the feature axis after a linear layer.
    """

    def __init__(self, num_features: int, axis: int = -1, eps: float = 1e-5,
                 momentum: float = 0.1, dtype=np.float32):
        super().__init__()
        self.num_features = num_features
        self.axis = axis
        self.eps = eps
        self.momentum = momentum
        self.scale = Parameter(np.ones(num_features, dtype=dtype))
        self.shift = Parameter(np.zeros(num_features, dtype=dtype))
        self.stats = RunningStats(num_features, dtype=dtype)
        self.register_buffer("running_mean", self.stats.mean)
        self.register_buffer("running_var", self.stats.var)

    def forward(self, x):
        return ops.batch_norm(x, self.scale, self.shift, self.stats,
                              self.training, self.eps, self.momentum, self.axis)


class Embedding(Module):
    def __init__(self, num_rows: int, dim: int, rng: np.random.Generator,
                 dtype=np.float32):
        super().__init__()
        self.num_rows = num_rows
        self.dim = dim
        self.table = Parameter(rng.standard_normal((num_rows, dim)).astype(dtype))

    def forward(self, ids) -> Tensor:
        return ops.take_rows(self.table, ids)
