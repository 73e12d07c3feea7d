"""Layer and container classes over the tensor core.

Modules own Parameters (tensors tagged with a kind so optimizers can
tell weights from biases and norm affines apart) and Buffers (plain
arrays such as batch-norm running statistics). Parameter traversal
order is attribute insertion order, which is fixed by construction
order and therefore deterministic for a given architecture.
"""
from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import tensor as T
from .seeding import SeededRng, INIT

WEIGHT = "weight"
BIAS = "bias"
NORM_WEIGHT = "norm_weight"
NORM_BIAS = "norm_bias"


class Parameter(T.Tensor):
    """Trainable tensor with a kind tag for optimizer policy decisions."""

    __slots__ = ("kind",)

    def __init__(self, data, kind: str, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.kind = kind


class Buffer:
    """Non-trainable module state (running statistics, counters)."""

    __slots__ = ("data",)

    def __init__(self, data):
        self.data = np.asarray(data)


class InitStream:
    """Hands out one fresh generator per layer, in construction order."""

    def __init__(self, rng: SeededRng):
        self._rng = rng.derive(INIT)
        self._count = 0

    def next(self) -> np.random.Generator:
        g = self._rng.derive(self._count).generator()
        self._count += 1
        return g


class Module:
    def __init__(self):
        self.training = True

    # -- traversal ----------------------------------------------------------

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, child in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(child, Parameter):
                yield full, child
            elif isinstance(child, Module):
                yield from child.named_parameters(f"{full}.")
            elif isinstance(child, (list, tuple)):
                for i, item in enumerate(child):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{full}.{i}", item

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, Buffer]]:
        for name, child in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(child, Buffer):
                yield full, child
            elif isinstance(child, Module):
                yield from child.named_buffers(f"{full}.")
            elif isinstance(child, (list, tuple)):
                for i, item in enumerate(child):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{full}.{i}.")

    def state_arrays(self, prefix: str = "") -> dict[str, np.ndarray]:
        """Flat name -> array view of all parameters and buffers."""
        out: dict[str, np.ndarray] = {}
        for name, p in self.named_parameters(prefix):
            out[name] = p.data
        for name, b in self.named_buffers(prefix):
            out[name] = b.data
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], prefix: str = "") -> None:
        for name, p in self.named_parameters(prefix):
            src = arrays[name]
            if src.shape != p.data.shape:
                raise ValueError(f"shape mismatch for {name}: {src.shape} vs {p.data.shape}")
            p.data[...] = src.astype(p.data.dtype)
        for name, b in self.named_buffers(prefix):
            src = arrays[name]
            if src.shape != b.data.shape:
                raise ValueError(f"shape mismatch for {name}: {src.shape} vs {b.data.shape}")
            b.data[...] = src.astype(b.data.dtype)

    # -- mode ---------------------------------------------------------------

    def train(self) -> "Module":
        return self._set_mode(True)

    def eval(self) -> "Module":
        return self._set_mode(False)

    def _set_mode(self, flag: bool) -> "Module":
        self.training = flag
        for _, child in vars(self).items():
            if isinstance(child, Module):
                child._set_mode(flag)
            elif isinstance(child, (list, tuple)):
                for item in child:
                    if isinstance(item, Module):
                        item._set_mode(flag)
        return self

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def freeze(self) -> "Module":
        for p in self.parameters():
            p.requires_grad = False
        return self

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError


def _he_uniform(g: np.random.Generator, shape: tuple[int, ...], fan_in: int, dtype) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return g.uniform(-bound, bound, size=shape).astype(dtype)


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, k: int, stride: int = 1, pad: int = 0,
                 bias: bool = True, *, init: InitStream, dtype=np.float32):
        super().__init__()
        self.stride = stride
        self.pad = pad
        g = init.next()
        self.weight = Parameter(_he_uniform(g, (cout, cin, k, k), cin * k * k, dtype), WEIGHT)
        self.bias = Parameter(np.zeros(cout, dtype=dtype), BIAS) if bias else None

    def forward(self, x: T.Tensor) -> T.Tensor:
        return T.conv2d(x, self.weight, self.bias, stride=self.stride, pad=self.pad)


class Linear(Module):
    def __init__(self, din: int, dout: int, bias: bool = True, *,
                 init: InitStream, dtype=np.float32):
        super().__init__()
        g = init.next()
        # stored [din, dout] so forward is a single GEMM without transpose
        self.weight = Parameter(_he_uniform(g, (din, dout), din, dtype), WEIGHT)
        self.bias = Parameter(np.zeros(dout, dtype=dtype), BIAS) if bias else None

    def forward(self, x: T.Tensor) -> T.Tensor:
        y = T.matmul(x, self.weight)
        return T.add(y, self.bias) if self.bias is not None else y


class BatchNorm(Module):
    """Shared batch-norm core; normalizes over every axis but axis 1.

    Train mode uses batch statistics and updates the running estimates
    with momentum 0.1 (unless update_running=False, as in target
    networks whose statistics follow the online ones by EMA instead).
    Eval mode requires statistics seen at least one batch, otherwise the
    call is rejected.
    """

    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1,
                 dtype=np.float32):
        super().__init__()
        self.eps = eps
        self.momentum = momentum
        self.weight = Parameter(np.ones(channels, dtype=dtype), NORM_WEIGHT)
        self.bias = Parameter(np.zeros(channels, dtype=dtype), NORM_BIAS)
        self.running_mean = Buffer(np.zeros(channels, dtype=dtype))
        self.running_var = Buffer(np.ones(channels, dtype=dtype))
        self.batches_seen = Buffer(np.zeros((), dtype=dtype))

    def forward(self, x: T.Tensor, update_running: bool | None = None) -> T.Tensor:
        if self.training:
            out, mean, var = T.batchnorm_train(x, self.weight, self.bias, self.eps)
            if update_running is None or update_running:
                m = self.momentum
                self.running_mean.data[...] = (1 - m) * self.running_mean.data + m * mean
                self.running_var.data[...] = (1 - m) * self.running_var.data + m * var
                self.batches_seen.data[...] = self.batches_seen.data + 1
            return out
        if float(self.batches_seen.data) == 0.0:
            raise RuntimeError("batchnorm eval requested before any statistics were seen")
        return T.batchnorm_eval(x, self.weight, self.bias,
                                self.running_mean.data, self.running_var.data, self.eps)


class BatchNorm2d(BatchNorm):
    pass


class BatchNorm1d(BatchNorm):
    pass


class Sequential(Module):
    def __init__(self, *layers: Module):
        super().__init__()
        self.layers = list(layers)

    def forward(self, x):
        for layer in self.layers:
            x = layer(x)
        return x
