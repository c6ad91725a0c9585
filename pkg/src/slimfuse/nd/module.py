"""Parameter-holding building blocks with name-addressable state."""

from __future__ import annotations

import numpy as np

from . import functional as F
from .tensor import Parameter, Tensor, default_dtype


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(default_dtype())


class Module:
    """Base class: tracks Parameters, sub-Modules and persistent buffers."""

    def __init__(self):
        self._buffers: dict[str, np.ndarray] = {}
        self._training = True

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = value
        object.__setattr__(self, name, value)

    def _children(self):
        """(name, Module) pairs, recursing through nested lists/tuples."""

        def walk(name, value):
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    yield from walk(f"{name}.{i}", item)

        for name, value in vars(self).items():
            if not name.startswith("_"):
                yield from walk(name, value)

    def _own_params(self):
        def walk(name, value):
            if isinstance(value, Parameter):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if not isinstance(item, Module):
                        yield from walk(f"{name}.{i}", item)

        for name, value in vars(self).items():
            if not name.startswith("_"):
                yield from walk(name, value)

    def named_parameters(self, prefix: str = ""):
        yield from ((f"{prefix}{n}", p) for n, p in self._own_params())
        for name, child in self._children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def parameters(self):
        for _, p in self.named_parameters():
            yield p

    def named_buffers(self, prefix: str = ""):
        for name in self._buffers:
            yield f"{prefix}{name}", getattr(self, name)
        for name, child in self._children():
            yield from child.named_buffers(f"{prefix}{name}.")

    def named_state(self):
        """Parameters then buffers, in stable declaration order."""
        yield from self.named_parameters()
        yield from self.named_buffers()

    def train(self, mode: bool = True):
        self._training = mode
        for _, child in self._children():
            child.train(mode)
        return self

    def eval(self):
        return self.train(False)

    @property
    def training(self) -> bool:
        return self._training

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Linear(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, bias: bool = True):
        super().__init__()
        self.weight = Parameter(kaiming_uniform(rng, (out_dim, in_dim), in_dim))
        self.bias = Parameter(np.zeros(out_dim, dtype=default_dtype())) if bias else None

    def forward(self, x):
        return F.linear(x, self.weight, self.bias)


class Conv2d(Module):
    def __init__(self, in_ch: int, out_ch: int, kernel: int, rng: np.random.Generator,
                 stride: int = 1, padding: int = 0, groups: int = 1, bias: bool = True):
        super().__init__()
        fan_in = (in_ch // groups) * kernel * kernel
        self.weight = Parameter(
            kaiming_uniform(rng, (out_ch, in_ch // groups, kernel, kernel), fan_in)
        )
        self.bias = Parameter(np.zeros(out_ch, dtype=default_dtype())) if bias else None
        self.stride = stride
        self.padding = padding
        self.groups = groups

    def forward(self, x):
        return F.conv2d(x, self.weight, self.bias, self.stride, self.padding, self.groups)


class BatchNorm2d(Module):
    def __init__(self, ch: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.gamma = Parameter(np.ones(ch, dtype=default_dtype()))
        self.beta = Parameter(np.zeros(ch, dtype=default_dtype()))
        self.register_buffer("running_mean", np.zeros(ch, dtype=np.float64))
        self.register_buffer("running_var", np.ones(ch, dtype=np.float64))
        self.momentum = momentum
        self.eps = eps
        self.frozen = False

    def forward(self, x):
        training = self._training and not self.frozen
        return F.batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                            training, self.momentum, self.eps)

    def fold_affine(self):
        """Inference-mode scale/shift pair equivalent to this layer."""
        scale = self.gamma.data / np.sqrt(self.running_var + self.eps)
        shift = self.beta.data - scale * self.running_mean
        return scale, shift


class ConvBnRelu(Module):
    """The conv + batch-norm + ReLU block both sensor encoders are built from."""

    def __init__(self, in_ch: int, out_ch: int, kernel: int, rng, stride: int = 1):
        super().__init__()
        self.conv = Conv2d(in_ch, out_ch, kernel, rng, stride=stride,
                           padding=kernel // 2, bias=False)
        self.bn = BatchNorm2d(out_ch)

    def forward(self, x):
        return F.relu(self.bn(self.conv(x)))


class Embedding(Module):
    def __init__(self, vocab: int, dim: int, rng: np.random.Generator):
        super().__init__()
        self.table = Parameter(rng.normal(0.0, 0.02, size=(vocab, dim)).astype(default_dtype()))

    def forward(self, ids):
        return F.embedding(self.table, ids)
