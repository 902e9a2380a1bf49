"""Machine-checkable proxies for sample quality.

* visual detail: the high-frequency energy fraction of the radial spectrum
* visual flaws: distance of a sample to the nearest clean generator pattern
* alignment: whether a nearest-template classifier recovers the requested family
* decoding: error and spread of the x0 and decode-at-t paths across timesteps
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from .data import FAMILIES, render_structure, structural_variants
from .diffkit.core import value_of
from .losses import x0_decode
from .sampler import SamplerConfig, sample_classes
from .schedule import q_sample
from .spectrum import SpectrumReport, hf_energy_ratio, mean_hf_ratio, radial_spectrum

__all__ = [
    "SpectrumReport", "radial_spectrum", "hf_energy_ratio", "mean_hf_ratio",
    "TemplateBank", "template_bank", "classify", "flaw_scores", "conditioning_accuracy",
    "ConditioningReport", "x0_variance_curve", "decode_error_curve", "CurveRow",
    "spearman", "sample_report", "write_report", "read_report",
]


# --------------------------------------------------------------------------
# template bank


def _trend_basis(n: int) -> np.ndarray:
    """Orthonormal rows spanning {1, x, y} on an n x n grid."""
    y, x = np.mgrid[0:n, 0:n].astype(np.float64)
    q, _ = np.linalg.qr(np.stack([np.ones(n * n), x.ravel(), y.ravel()], axis=1))
    return q.T


def _detrend(flat: np.ndarray, basis: np.ndarray) -> np.ndarray:
    return flat - (flat @ basis.T) @ basis


@dataclass(frozen=True)
class TemplateBank:
    """Unit-norm detrended structural patterns, one row each.

    Every corpus image has channels ``a_c + b_c * v`` with ``v`` in the bank
    (gradient blobs add a linear ramp, which the detrending absorbs).
    """

    size: int
    families: tuple[str, ...]
    templates: np.ndarray  # [K, size * size]
    family_of: np.ndarray  # [K] family index
    basis: np.ndarray  # [3, size * size]


@lru_cache(maxsize=8)
def template_bank(size: int = 32, families: tuple[str, ...] = FAMILIES,
                  periods: tuple[int, ...] = tuple(range(2, 9))) -> TemplateBank:
    basis = _trend_basis(size)
    rows, fam = [], []
    for k, family in enumerate(families):
        for p in periods:
            for params in structural_variants(family, p):
                v = _detrend(render_structure(family, params, size).ravel(), basis)
                norm = np.linalg.norm(v)
                if norm > 1e-8:
                    rows.append(v / norm)
                    fam.append(k)
    return TemplateBank(size, tuple(families), np.asarray(rows), np.asarray(fam), basis)


def _as_batch(images) -> np.ndarray:
    x = np.asarray(images, dtype=np.float64)
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4 or x.shape[2] != x.shape[3]:
        raise ValueError(f"expected square images [N, C, H, W], got {np.shape(images)}")
    return x


def _bank_for(images, bank):
    x = _as_batch(images)
    return x, bank if bank is not None else template_bank(x.shape[-1])


def family_scores(images, bank: TemplateBank | None = None) -> np.ndarray:
    """[N, F] best |correlation| of the grey image with each family's templates."""
    x, bank = _bank_for(images, bank)
    grey = _detrend(x.mean(axis=1).reshape(len(x), -1), bank.basis)
    norm = np.linalg.norm(grey, axis=1, keepdims=True)
    corr = np.abs(grey @ bank.templates.T) / np.maximum(norm, 1e-12)
    scores = np.zeros((len(x), len(bank.families)))
    for k in range(len(bank.families)):
        scores[:, k] = corr[:, bank.family_of == k].max(axis=1)
    return scores


def classify(images, bank: TemplateBank | None = None) -> np.ndarray:
    """Nearest-template family index per image (ties go to the lower index)."""
    return np.argmax(family_scores(images, bank), axis=1)


def flaw_scores(images, bank: TemplateBank | None = None) -> np.ndarray:
    """Per-pixel MSE of each image to its best affine fit on a single template.

    Each channel is fit as ``a + b x + c y + d v`` with one shared template
    ``v``; the score is the smallest residual over the bank. Pristine corpus
    images score ~0, blur, blocking and noise all raise it.
    """
    x, bank = _bank_for(images, bank)
    n, c = x.shape[:2]
    flat = _detrend(x.reshape(n * c, -1), bank.basis)
    proj = (flat @ bank.templates.T).reshape(n, c, -1)
    explained = (proj ** 2).sum(axis=1).max(axis=1)
    total = (flat ** 2).reshape(n, c, -1).sum(axis=(1, 2))
    return np.maximum(total - explained, 0.0) / (c * x.shape[2] * x.shape[3])


# --------------------------------------------------------------------------
# conditioning accuracy


@dataclass(frozen=True)
class ConditioningReport:
    accuracy: float
    per_class: tuple[float, ...]
    chance: float
    flagged: bool  # below chance + 10 points: reported, never raised

    def to_dict(self) -> dict:
        return {"accuracy": self.accuracy, "chance": self.chance, "flagged": self.flagged,
                **{f"accuracy_c{k}": a for k, a in enumerate(self.per_class)}}


def accuracy_report(predicted, labels, num_classes: int) -> ConditioningReport:
    predicted, labels = np.asarray(predicted), np.asarray(labels)
    hit = predicted == labels
    per = tuple(float(hit[labels == k].mean()) if np.any(labels == k) else float("nan")
                for k in range(num_classes))
    acc = float(hit.mean())
    chance = 1.0 / num_classes
    return ConditioningReport(acc, per, chance, acc < chance + 0.1)


def conditioning_accuracy(bundle, sampler_cfg: SamplerConfig, n_per_class: int, seed: int = 0,
                          families: tuple[str, ...] = FAMILIES) -> ConditioningReport:
    """Sample every class and score how often the classifier agrees with the request."""
    images, labels = sample_classes(bundle, sampler_cfg, n_per_class, seed)
    bank = template_bank(images.shape[-1], tuple(families))
    return accuracy_report(classify(images, bank), labels, bundle.den_config.num_classes)


# --------------------------------------------------------------------------
# decoding curves


@dataclass(frozen=True)
class CurveRow:
    t: int
    path: str  # "x0" (decode the clean estimate) or "decode_t" (decode at t)
    mean: float
    variance: float
    n: int


def _curve(bundle, z0, labels, t_grid, n_draws, seed, batch, errors_at):
    z0 = np.asarray(z0, dtype=np.float32)
    labels = np.broadcast_to(np.asarray(labels, dtype=np.int64), (len(z0),))
    rows = []
    for t in t_grid:
        rng = np.random.default_rng([seed, int(t)])
        errs = []
        for _ in range(n_draws):
            idx = rng.integers(0, len(z0), size=batch)
            eps = rng.standard_normal((batch,) + z0.shape[1:], dtype=np.float32)
            tt = np.full(batch, int(t))
            errs.append(errors_at(z0[idx], labels[idx], tt, eps))
        e = np.concatenate(errs)
        rows.append((int(t), e))
    return rows


def x0_variance_curve(bundle, z0, t_grid, labels=None, n_draws: int = 100, seed: int = 0,
                      batch: int = 8, eps_fn=None) -> list[CurveRow]:
    """Per-pixel ||x0_decode - D(z0)||^2 across noise draws at each t.

    ``eps_fn(z_t, t, labels, eps)`` overrides the bundle's prediction (used
    with the oracle that returns the drawn noise).
    """
    if labels is None:
        labels = bundle.den_config.null_class

    def errors_at(z, lab, t, eps):
        target = value_of(bundle.decode(z))
        zt = value_of(q_sample(bundle.schedule, z, t, eps))
        eps_hat = eps_fn(zt, t, lab, eps) if eps_fn else value_of(bundle.predict_noise(zt, t, lab))
        pred = value_of(x0_decode(bundle, zt, t, eps_hat=eps_hat))
        return ((pred - target) ** 2).reshape(len(z), -1).mean(axis=1)

    return [CurveRow(t, "x0", float(e.mean()), float(e.var()), len(e))
            for t, e in _curve(bundle, z0, labels, t_grid, n_draws, seed, batch, errors_at)]


def decode_error_curve(bundle, z0, t_grid, labels=None, n_draws: int = 100, seed: int = 0,
                       batch: int = 8, eps_fn=None) -> list[CurveRow]:
    """Per-pixel ||D(z_t) - D(q(z0, t, eps_hat))||^2, the target-vs-prediction
    error seen by the decode-at-t pixel loss."""
    if labels is None:
        labels = bundle.den_config.null_class

    def errors_at(z, lab, t, eps):
        zt = value_of(q_sample(bundle.schedule, z, t, eps))
        eps_hat = eps_fn(zt, t, lab, eps) if eps_fn else value_of(bundle.predict_noise(zt, t, lab))
        target = value_of(bundle.decode(zt))
        pred = value_of(bundle.decode(q_sample(bundle.schedule, z, t, eps_hat)))
        return ((pred - target) ** 2).reshape(len(z), -1).mean(axis=1)

    return [CurveRow(t, "decode_t", float(e.mean()), float(e.var()), len(e))
            for t, e in _curve(bundle, z0, labels, t_grid, n_draws, seed, batch, errors_at)]


def spearman(a, b) -> float:
    from scipy.stats import spearmanr

    return float(spearmanr(a, b)[0])


# --------------------------------------------------------------------------
# reports


def sample_report(images, labels, num_classes: int, bank: TemplateBank | None = None) -> dict:
    """hf ratio, flaw proxy and classifier accuracy of one sample set."""
    x, bank = _bank_for(images, bank)
    acc = accuracy_report(classify(x, bank), labels, num_classes)
    return {"hf_energy_ratio": mean_hf_ratio(x), "flaw_mse": float(flaw_scores(x, bank).mean()),
            **acc.to_dict()}


REPORT_FIELDS = ("run_id", "step", "metric", "value")


def write_report(path, run_id: str, step: int, metrics: dict, append: bool = False) -> Path:
    """CSV rows keyed by (run id, checkpoint step, metric)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fresh = not (append and path.exists())
    with open(path, "w" if fresh else "a", newline="") as f:
        w = csv.writer(f)
        if fresh:
            w.writerow(REPORT_FIELDS)
        for k in sorted(metrics):
            v = metrics[k]
            w.writerow([run_id, int(step), k, repr(float(v)) if not isinstance(v, str) else v])
    return path


def read_report(path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))
