"""Parameter containers and the convolution / batch-norm layers built on them."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import functional as F
from .tensor import Tensor, get_default_dtype


class StateError(RuntimeError):
    """Raised when an operation is called in the wrong train/infer/fold state."""


class Parameter(Tensor):
    """A trainable leaf tensor. ``bounds`` (lo, hi) is enforced by ``Module.project``."""

    __slots__ = ("bounds",)

    def __init__(self, data, bounds: tuple[float, float] | None = None):
        super().__init__(data, requires_grad=True)
        self.bounds = bounds


class Module:
    _buffer_names: tuple[str, ...] = ()

    def __init__(self) -> None:
        self.training = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def _children(self) -> Iterator[tuple[str, object]]:
        for name, value in vars(self).items():
            if isinstance(value, (Parameter, Module)):
                yield name, value
            elif isinstance(value, (list, tuple)) and value and all(isinstance(v, (Module, Parameter)) for v in value):
                for i, v in enumerate(value):
                    yield f"{name}.{i}", v

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix, self
        for name, child in self._children():
            if isinstance(child, Module):
                yield from child.named_modules(f"{prefix}.{name}" if prefix else name)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, child in self._children():
            full = f"{prefix}.{name}" if prefix else name
            if isinstance(child, Parameter):
                yield full, child
            else:
                yield from child.named_parameters(full)

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self) -> Iterator[tuple[str, np.ndarray]]:
        for path, mod in self.named_modules():
            for b in mod._buffer_names:
                yield (f"{path}.{b}" if path else b), getattr(mod, b)

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {name: p.data for name, p in self.named_parameters()}
        out.update(self.named_buffers())
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        buffers = {name: (mod, b) for path, mod in self.named_modules() for b in mod._buffer_names
                   for name in [f"{path}.{b}" if path else b]}
        missing = (set(params) | set(buffers)) - set(state)
        unexpected = set(state) - set(params) - set(buffers)
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={sorted(missing)[:5]} unexpected={sorted(unexpected)[:5]}")
        for name, p in params.items():
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise ValueError(f"{name}: shape {value.shape} != {p.shape}")
            p.data = value.astype(p.dtype).copy()
        for name, (mod, b) in buffers.items():
            setattr(mod, b, np.asarray(state[name]).copy())

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, child in self._children():
            if isinstance(child, Module):
                child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def project(self) -> None:
        """Clamp every bounded parameter back into its range."""
        for p in self.parameters():
            if p.bounds is not None:
                np.clip(p.data, p.bounds[0], p.bounds[1], out=p.data)

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


def _uniform(rng: np.random.Generator, shape, bound: float) -> np.ndarray:
    return rng.uniform(-bound, bound, size=shape).astype(get_default_dtype())


class Conv2d(Module):
    """Convolution with "same" padding by default (``dilation * (k - 1) / 2``)."""

    def __init__(self, cin: int, cout: int, k: int, stride: int = 1, dilation: int = 1,
                 padding: int | None = None, bias: bool = False, rng: np.random.Generator | None = None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.cin, self.cout, self.k = cin, cout, k
        self.stride, self.dilation = stride, dilation
        self.padding = F.same_padding(k, dilation) if padding is None else padding
        bound = 1.0 / math.sqrt(cin * k * k)
        self.weight = Parameter(_uniform(rng, (cout, cin, k, k), bound))
        self.bias = Parameter(_uniform(rng, (cout,), bound)) if bias else None

    def forward(self, x: Tensor, ctx=None) -> Tensor:
        if ctx is not None:
            ctx.record_conv(self, x)
        return F.conv2d(x, self.weight, self.bias, self.stride, self.dilation, self.padding)


class BatchNorm2d(Module):
    _buffer_names = ("running_mean", "running_var")

    def __init__(self, channels: int, momentum: float = F.BN_MOMENTUM, eps: float = F.BN_EPS):
        super().__init__()
        dt = get_default_dtype()
        self.channels = channels
        self.momentum, self.eps = momentum, eps
        self.gamma = Parameter(np.ones(channels, dtype=dt))
        self.beta = Parameter(np.zeros(channels, dtype=dt))
        self.running_mean = np.zeros(channels, dtype=dt)
        self.running_var = np.ones(channels, dtype=dt)

    def forward(self, x: Tensor) -> Tensor:
        return F.batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                            self.training, self.momentum, self.eps)


def fold_bn_into_conv(weight: np.ndarray, bias: np.ndarray | None, bn: BatchNorm2d) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(weight', bias')`` so that ``conv(x, weight') + bias'`` equals ``bn(conv(x, weight) + bias)``
    evaluated with the running statistics."""
    if bn.training:
        raise StateError("cannot fold batch norm that is still in training mode")
    scale = bn.gamma.data / np.sqrt(bn.running_var + bn.eps)
    b = np.zeros(weight.shape[0], dtype=weight.dtype) if bias is None else bias
    w_f = weight * scale.reshape(-1, 1, 1, 1)
    b_f = (b - bn.running_mean) * scale + bn.beta.data
    return w_f.astype(weight.dtype), b_f.astype(weight.dtype)


class ConvBN(Module):
    """Convolution followed by batch norm; foldable into a single biased convolution for inference."""

    def __init__(self, cin: int, cout: int, k: int, stride: int = 1, dilation: int = 1,
                 padding: int | None = None, rng: np.random.Generator | None = None):
        super().__init__()
        self.conv = Conv2d(cin, cout, k, stride, dilation, padding, bias=False, rng=rng)
        self.bn = BatchNorm2d(cout)
        self.folded = False
        self._fw: Tensor | None = None
        self._fb: Tensor | None = None

    def fold(self) -> None:
        w, b = fold_bn_into_conv(self.conv.weight.data, None, self.bn)
        self._fw, self._fb = Tensor(w, dtype=w.dtype), Tensor(b, dtype=b.dtype)
        self.folded = True

    def unfold(self) -> None:
        self.folded = False
        self._fw = self._fb = None

    def train(self, mode: bool = True) -> "Module":
        if mode and self.folded:
            self.unfold()
        return super().train(mode)

    def forward(self, x: Tensor, ctx=None) -> Tensor:
        c = self.conv
        if ctx is not None:
            ctx.record_conv(c, x, bn_folded=self.folded)
        if self.folded:
            return F.conv2d(x, self._fw, self._fb, c.stride, c.dilation, c.padding)
        return self.bn(F.conv2d(x, c.weight, None, c.stride, c.dilation, c.padding))
