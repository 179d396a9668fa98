"""Central finite-difference checks of reverse-mode gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, no_grad


def numerical_grad(f: Callable[[], float], array: np.ndarray, index: tuple, h: float = 1e-4) -> float:
    old = array[index]
    array[index] = old + h
    fp = f()
    array[index] = old - h
    fm = f()
    array[index] = old
    return (fp - fm) / (2.0 * h)


@dataclass
class GradCheckResult:
    analytic: list[float] = field(default_factory=list)
    numeric: list[float] = field(default_factory=list)
    labels: list[str] = field(default_factory=list)

    def rel_errors(self, floor: float = 1e-8) -> np.ndarray:
        a = np.asarray(self.analytic)
        n = np.asarray(self.numeric)
        return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)

    @property
    def max_rel_error(self) -> float:
        return float(self.rel_errors().max()) if self.analytic else 0.0

    def __len__(self) -> int:
        return len(self.analytic)


def gradcheck(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    names: Sequence[str] | None = None,
    n_coords: int | None = None,
    h: float = 1e-4,
    rng: np.random.Generator | None = None,
) -> GradCheckResult:
    """Compare analytic gradients of ``loss_fn`` against central differences.

    ``loss_fn`` must rebuild the graph from the current parameter values on
    each call. With ``n_coords`` set, that many coordinates are drawn at
    random across all parameters (without replacement); otherwise every
    coordinate is checked.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    names = list(names) if names is not None else [f"p{i}" for i in range(len(params))]
    for p in params:
        p.grad = None
    loss = loss_fn()
    loss.backward()
    grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]

    coords = [(i, idx) for i, p in enumerate(params) for idx in np.ndindex(p.shape)]
    if n_coords is not None and n_coords < len(coords):
        pick = rng.choice(len(coords), size=n_coords, replace=False)
        coords = [coords[j] for j in sorted(pick)]

    def f() -> float:
        with no_grad():
            return float(loss_fn().data)

    result = GradCheckResult()
    for i, idx in coords:
        result.analytic.append(float(grads[i][idx]))
        result.numeric.append(numerical_grad(f, params[i].data, idx, h))
        result.labels.append(f"{names[i]}{list(idx)}")
    return result
