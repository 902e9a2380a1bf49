"""Central finite differences, the oracle every backward rule is checked against."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

from .core import evaluate, gradient


def _scalar(fn, params, inputs) -> float:
    out = fn(params, *inputs)
    out = np.asarray(out.value if hasattr(out, "value") else out)
    if out.size != 1:
        raise ValueError(f"finite differences need a scalar function, got shape {out.shape}")
    return float(out.reshape(()))


def finite_difference_gradient(
    fn: Callable,
    inputs: Sequence[np.ndarray],
    params: Mapping[str, np.ndarray],
    step: float = 1e-3,
    indices: Mapping[str, np.ndarray] | None = None,
) -> dict[str, np.ndarray]:
    """(f(p + h) - f(p - h)) / 2h for each parameter element.

    ``indices`` optionally restricts each parameter to a subset of flat
    element indices; unvisited entries are left as NaN.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    work = {k: np.array(v, copy=True) for k, v in params.items()}
    grads = {}
    for name, arr in work.items():
        flat = arr.reshape(-1)
        g = np.full(flat.shape, np.nan if indices and name in indices else 0.0)
        idx = indices[name] if indices and name in indices else range(flat.size)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + step
            fp = _scalar(fn, work, inputs)
            flat[i] = orig - step
            fm = _scalar(fn, work, inputs)
            flat[i] = orig
            g[i] = (fp - fm) / (2 * step)
        grads[name] = g.reshape(arr.shape)
    return grads


def relative_error(a, b, floor: float = 1e-4) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


@dataclass
class GradCheck:
    errors: dict[str, float]  # worst relative error per parameter
    tolerance: float

    @property
    def worst(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def ok(self) -> bool:
        return self.worst <= self.tolerance


def check_gradients(
    fn: Callable,
    inputs: Sequence[np.ndarray],
    params: Mapping[str, np.ndarray],
    step: float = 1e-3,
    tolerance: float = 1e-3,
    max_elements: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradCheck:
    """Compare reverse-mode gradients with central differences in float64.

    With ``max_elements`` set, at most that many randomly chosen elements per
    parameter are probed.
    """
    params64 = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}
    inputs64 = [np.asarray(x, dtype=np.float64) if np.issubdtype(np.asarray(x).dtype, np.floating)
                else np.asarray(x) for x in inputs]
    _, trace = evaluate(fn, inputs64, params64)
    analytic = gradient(trace)
    indices = None
    if max_elements is not None:
        rng = rng or np.random.default_rng(0)
        indices = {
            k: (rng.choice(v.size, size=max_elements, replace=False) if v.size > max_elements
                else np.arange(v.size))
            for k, v in params64.items()
        }
    numeric = finite_difference_gradient(fn, inputs64, params64, step, indices)
    errors = {}
    for k in params64:
        mask = ~np.isnan(numeric[k])
        err = relative_error(analytic[k][mask], numeric[k][mask])
        errors[k] = float(err.max()) if err.size else 0.0
    return GradCheck(errors, tolerance)
