"""Discrete DDPM noise schedule and the closed-form forward process."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffkit import ops
from .diffkit.core import Node


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseSchedule:
    """beta/alpha/alpha-bar tables for timesteps t = 1..T.

    Tables are stored 0-based (``betas[t - 1]`` is beta_t). Index 0 of
    :meth:`alpha_bar` is the clean-data extension, alpha-bar_0 = 1.
    """

    T: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    def __post_init__(self):
        for arr in (self.betas, self.alphas, self.alpha_bars):
            arr.setflags(write=False)

    def check_t(self, t, allow_zero: bool = False) -> np.ndarray:
        t = np.asarray(t, dtype=np.int64)
        lo = 0 if allow_zero else 1
        if t.size and (t.min() < lo or t.max() > self.T):
            raise ScheduleError(f"timestep out of range [{lo}, {self.T}]: {t.min()}..{t.max()}")
        return t

    def alpha_bar(self, t, allow_zero: bool = True) -> np.ndarray:
        t = self.check_t(t, allow_zero=allow_zero)
        table = np.concatenate([[1.0], self.alpha_bars])
        return table[t]

    def to_dict(self) -> dict:
        return {"T": self.T, "beta_start": float(self.betas[0]), "beta_end": float(self.betas[-1]),
                "kind": "linear"}

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseSchedule":
        return linear_schedule(int(d["T"]), float(d["beta_start"]), float(d["beta_end"]))


def linear_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Betas linearly spaced from ``beta_start`` to ``beta_end`` inclusive."""
    if T < 1:
        raise ScheduleError(f"T must be >= 1, got {T}")
    if not (0 < beta_start <= beta_end < 1):
        raise ScheduleError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alphas = 1.0 - betas
    return NoiseSchedule(T, betas, alphas, np.cumprod(alphas))


def _coef(values, like, batch_shape):
    """Broadcast per-sample coefficients against a batch of tensors."""
    c = np.asarray(values, dtype=like)
    if c.ndim == 0:
        return c
    return c.reshape((c.shape[0],) + (1,) * (len(batch_shape) - 1))


def _dtype(x):
    return x.dtype if isinstance(x, (Node, np.ndarray)) else np.float32


def q_sample(schedule: NoiseSchedule, z0, t, eps):
    """z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps.

    ``t`` is a scalar or one timestep per batch element; ``t = 0`` gives z0.
    Works on plain arrays and on traced nodes (for the pixel losses).
    """
    zs, es = np.shape(z0.value if isinstance(z0, Node) else z0), np.shape(eps.value if isinstance(eps, Node) else eps)
    if zs != es:
        raise ScheduleError(f"q_sample: z0 shape {zs} != eps shape {es}")
    ab = schedule.alpha_bar(t)
    dt = _dtype(z0)
    a = _coef(np.sqrt(ab), dt, zs)
    s = _coef(np.sqrt(1.0 - ab), dt, zs)
    return ops.add(ops.mul(z0, a), ops.mul(eps, s))


def sample_timesteps(rng: np.random.Generator, schedule: NoiseSchedule, n: int) -> np.ndarray:
    """Uniform draw over {1..T}."""
    return rng.integers(1, schedule.T + 1, size=n)
