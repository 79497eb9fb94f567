"""Minimal parameter/module system on top of the tensor core."""

from __future__ import annotations

import numpy as np

from . import ops
from .errors import ConfigError
from .tensor import Tensor

__all__ = ["Parameter", "Module", "ModuleList", "Conv2d", "ChannelNorm", "ConvBlock", "he_uniform"]


class Parameter(Tensor):
    """A trainable tensor with a dot-separated path name inside a model."""

    __slots__ = ("name", "trainable")

    def __init__(self, data, trainable: bool = True):
        super().__init__(data, requires_grad=trainable)
        self.name = ""
        self.trainable = trainable


def he_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Module:
    """Base class; tracks parameters and submodules by attribute name."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_modules", {})

    def __setattr__(self, key, value):
        if isinstance(value, Parameter):
            self._params[key] = value
        elif isinstance(value, Module):
            self._modules[key] = value
        object.__setattr__(self, key, value)

    def named_parameters(self, prefix: str = ""):
        """Yield (dot-path, Parameter) pairs; paths are unique by construction."""
        for key, p in self._params.items():
            name = f"{prefix}{key}"
            p.name = name
            yield name, p
        for key, m in self._modules.items():
            yield from m.named_parameters(f"{prefix}{key}.")

    def parameters(self):
        for _, p in self.named_parameters():
            yield p

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class ModuleList(Module):
    def __init__(self, modules=()):
        super().__init__()
        self._items = []
        for m in modules:
            self.append(m)

    def append(self, m: Module):
        self._modules[str(len(self._items))] = m
        self._items.append(m)

    def __iter__(self):
        return iter(self._items)

    def __getitem__(self, i):
        return self._items[i]

    def __len__(self):
        return len(self._items)


class Conv2d(Module):
    """Convolution layer; He-uniform weights unless zero-initialized."""

    def __init__(self, in_ch: int, out_ch: int, kernel: int = 3, padding: int = 0,
                 rng: np.random.Generator | None = None, zero_init: bool = False):
        super().__init__()
        if in_ch < 1 or out_ch < 1 or kernel < 1:
            raise ConfigError(f"Conv2d: bad channel/kernel spec ({in_ch}, {out_ch}, {kernel})")
        self.in_ch = in_ch
        self.out_ch = out_ch
        self.kernel = kernel
        self.padding = padding
        if zero_init:
            w = np.zeros((out_ch, in_ch, kernel, kernel))
        else:
            if rng is None:
                raise ConfigError("Conv2d needs an rng unless zero_init=True")
            w = he_uniform(rng, (out_ch, in_ch, kernel, kernel), in_ch * kernel * kernel)
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(out_ch))

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, stride=(1, 1),
                          padding=(self.padding, self.padding))


class ChannelNorm(Module):
    """Learned-affine per-channel spatial normalization (train == eval)."""

    def __init__(self, channels: int, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.gamma = Parameter(np.ones(channels))
        self.beta = Parameter(np.zeros(channels))

    def forward(self, x: Tensor) -> Tensor:
        return ops.channel_norm(x, self.gamma, self.beta, eps=self.eps)


class ConvBlock(Module):
    """3x3 conv (pad 1) -> channel norm -> relu."""

    def __init__(self, in_ch: int, out_ch: int, rng: np.random.Generator):
        super().__init__()
        self.conv = Conv2d(in_ch, out_ch, kernel=3, padding=1, rng=rng)
        self.norm = ChannelNorm(out_ch)

    def forward(self, x: Tensor) -> Tensor:
        return ops.relu(self.norm(self.conv(x)))
