"""Iterative LIF and adaptive-threshold LIF (AiLIF) neurons with surrogate gradients.

One step of the AiLIF cell::

    u[t] = tau * u[t-1] * (1 - y[t-1]) + I[t]
    a[t] = tau_a * a[t-1] + y[t-1]
    A[t] = u_th + beta * a[t]
    y[t] = H(u[t] - A[t])

With ``beta = 0`` the threshold is constant and the cell is the plain LIF.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field, replace
from typing import Callable, Iterator, Sequence

import numpy as np

from .autograd import Module, Parameter, Tensor
from .autograd.tensor import get_default_dtype

_SMOOTH_FORWARD = False


@contextlib.contextmanager
def smooth_spikes() -> Iterator[None]:
    """Replace the Heaviside forward by the surrogate's integral.

    The backward pass is unchanged, so reverse-mode gradients become the
    exact derivatives of the (now smooth) forward map and can be compared
    against finite differences.
    """
    global _SMOOTH_FORWARD
    old = _SMOOTH_FORWARD
    _SMOOTH_FORWARD = True
    try:
        yield
    finally:
        _SMOOTH_FORWARD = old


@dataclass(frozen=True)
class Surrogate:
    """Unit-mass, symmetric stand-in for the Heaviside derivative."""

    family: str = "triangle"
    temperature: float = 1.0

    def __post_init__(self):
        if self.family not in ("triangle", "sigmoid"):
            raise ValueError(f"unknown surrogate family {self.family!r}")
        if self.temperature <= 0:
            raise ValueError("surrogate temperature must be positive")

    def grad(self, v: np.ndarray) -> np.ndarray:
        w = self.temperature
        if self.family == "triangle":
            return np.maximum(0.0, w - np.abs(v)) / (w * w)
        k = 4.0 / w
        s = 1.0 / (1.0 + np.exp(-k * v))
        return k * s * (1.0 - s)

    def cdf(self, v: np.ndarray) -> np.ndarray:
        w = self.temperature
        if self.family == "triangle":
            vc = np.clip(v, -w, w)
            lower = (vc + w) ** 2 / (2 * w * w)
            upper = 1.0 - (w - vc) ** 2 / (2 * w * w)
            return np.where(vc <= 0, lower, upper)
        return 1.0 / (1.0 + np.exp(-(4.0 / w) * v))


def spike(v: Tensor, surrogate: Surrogate) -> Tensor:
    """Heaviside firing ``H(v)`` (``v >= 0`` fires) with surrogate backward."""
    vd = v.data
    if _SMOOTH_FORWARD:
        out = surrogate.cdf(vd).astype(vd.dtype)
    else:
        out = (vd >= 0).astype(vd.dtype)

    def backward(g):
        return (g * surrogate.grad(vd).astype(vd.dtype),)

    return Tensor._make(out, (v,), backward)


@dataclass(frozen=True)
class NeuronConfig:
    u_th: float = 0.5
    tau: float = 0.2
    beta: float = 0.0
    tau_a: float = 0.3
    tau_a_range: tuple[float, float] = (0.2, 0.4)
    adaptive: bool = False
    surrogate: Surrogate = field(default_factory=Surrogate)

    def __post_init__(self):
        if not 0.0 < self.tau < 1.0:
            raise ValueError(f"tau must lie in (0, 1), got {self.tau}")
        if self.beta < 0:
            raise ValueError("beta must be non-negative")
        lo, hi = self.tau_a_range
        if not 0.0 < lo <= hi < 1.0:
            raise ValueError(f"tau_a range must lie inside (0, 1), got {self.tau_a_range}")

    @classmethod
    def lif(cls, u_th: float = 0.5, **kw) -> "NeuronConfig":
        return cls(u_th=u_th, beta=0.0, adaptive=False, **kw)

    @classmethod
    def ailif(cls, u_th: float = 0.5, beta: float = 0.07, tau_a: float = 0.3, **kw) -> "NeuronConfig":
        return cls(u_th=u_th, beta=beta, tau_a=tau_a, adaptive=True, **kw)

    def with_threshold(self, u_th: float) -> "NeuronConfig":
        return replace(self, u_th=u_th)


@dataclass
class NeuronState:
    u: Tensor
    a: Tensor
    y_prev: Tensor

    @classmethod
    def zeros(cls, shape, dtype=None) -> "NeuronState":
        dtype = dtype or get_default_dtype()
        z = np.zeros(shape, dtype=dtype)
        return cls(Tensor(z, dtype=dtype), Tensor(z, dtype=dtype), Tensor(z, dtype=dtype))

    def detach(self) -> "NeuronState":
        return NeuronState(self.u.detach(), self.a.detach(), self.y_prev.detach())

    def threshold(self, cfg: NeuronConfig) -> np.ndarray:
        return cfg.u_th + cfg.beta * self.a.data if cfg.adaptive else np.full(self.u.shape, cfg.u_th)


def adaptation_bound(cfg: NeuronConfig, tau_a: float | None = None) -> tuple[float, float]:
    """Range ``[u_th, u_th + beta / (1 - tau_a)]`` of the adaptive threshold."""
    tau_a = cfg.tau_a if tau_a is None else tau_a
    if not 0.0 < tau_a < 1.0:
        raise ValueError(f"tau_a must lie in (0, 1), got {tau_a}")
    if not cfg.adaptive or cfg.beta == 0.0:
        return cfg.u_th, cfg.u_th
    return cfg.u_th, cfg.u_th + cfg.beta / (1.0 - tau_a)


def lif_step(
    state: NeuronState | None,
    current: Tensor,
    cfg: NeuronConfig,
    tau_a: Tensor | float | None = None,
    layer: str = "",
) -> tuple[Tensor, NeuronState]:
    """Advance one time step; returns the binary spikes and the new state."""
    if not np.all(np.isfinite(current.data)):
        raise FloatingPointError(f"non-finite input current in layer {layer or '<anonymous>'}")
    if state is None:
        state = NeuronState.zeros(current.shape, current.dtype)
    if state.u.shape != current.shape:
        raise ValueError(f"layer {layer}: state shape {state.u.shape} != input shape {current.shape}")
    u = state.u * (cfg.tau * (1.0 - state.y_prev)) + current
    if cfg.adaptive:
        ta = cfg.tau_a if tau_a is None else tau_a
        a = state.y_prev + state.a * ta
        v = u - (a * cfg.beta + cfg.u_th)
    else:
        a = state.a
        v = u - cfg.u_th
    y = spike(v, cfg.surrogate)
    return y, NeuronState(u, a, y)


class SpikingNeuron(Module):
    """Stateful neuron layer. State lives in the step context, keyed by ``path``."""

    def __init__(self, cfg: NeuronConfig):
        super().__init__()
        self.cfg = cfg
        self.path = ""
        self.tau_a = Parameter(np.array(cfg.tau_a), bounds=cfg.tau_a_range) if cfg.adaptive else None

    @property
    def adaptive(self) -> bool:
        return self.cfg.adaptive

    def forward(self, current: Tensor, ctx) -> Tensor:
        state = ctx.get_state(self.path)
        y, new = lif_step(state, current, self.cfg, self.tau_a, layer=self.path)
        ctx.put_state(self.path, new, y)
        return y


PLACEMENTS = ("first", "all", "none")


def run_sequence(
    inputs: Sequence[Tensor],
    cfg: NeuronConfig,
    tau_a: Tensor | float | None = None,
    on_rate: Callable[[int, float], None] | None = None,
    state: NeuronState | None = None,
) -> tuple[list[Tensor], NeuronState]:
    """Drive one neuron layer with a time-major list of input currents."""
    if len(inputs) == 0:
        raise ValueError("run_sequence needs at least one time step")
    outs = []
    for t, current in enumerate(inputs):
        y, state = lif_step(state, current, cfg, tau_a)
        outs.append(y)
        if on_rate is not None:
            on_rate(t, float(y.data.mean()))
    return outs, state


def placement_config(placement: str, index: int, base: NeuronConfig, adaptive: NeuronConfig) -> NeuronConfig:
    """Neuron config for the ``index``-th spiking layer under a placement policy."""
    if placement not in PLACEMENTS:
        raise ValueError(f"placement must be one of {PLACEMENTS}, got {placement!r}")
    if placement == "all" or (placement == "first" and index == 0):
        return adaptive
    return base
