"""Latent, pixel and preference objectives for diffusion post-training.

Every loss is a pure function of (bundle, [reference], batch, noise draw)
and returns a scalar: a plain array, or a traced node when ``params`` holds
traced denoiser weights. All squared norms are means over elements.

Pixel objectives decode through the frozen decoder D, so gradients reach the
denoiser through D without D itself being updated.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffkit import ops
from .diffkit.core import value_of
from .schedule import NoiseSchedule, q_sample

REWARD_MODES = ("dpo+dpoPix", "dpo+simpoPix", "simpo+simpoPix", "dpoOnly")
SFT_OBJECTIVES = ("latent", "pixel", "combined")


class LossError(ValueError):
    pass


@dataclass(frozen=True)
class LossConfig:
    lam: float = 8.0
    mu: float = 8.0
    beta: float = 500.0
    share_noise: bool = False

    def __post_init__(self):
        if self.lam < 0 or self.mu < 0:
            raise LossError(f"pixel weights must be >= 0, got lambda={self.lam}, mu={self.mu}")
        if self.beta <= 0:
            raise LossError(f"beta must be > 0, got {self.beta}")


@dataclass(frozen=True)
class NoiseDraw:
    """Timesteps and Gaussian noise for one batch.

    SFT batches use ``eps``; preference batches use ``eps_w``/``eps_l`` with
    one shared timestep per pair.
    """

    t: np.ndarray
    eps: np.ndarray | None = None
    eps_w: np.ndarray | None = None
    eps_l: np.ndarray | None = None


@dataclass(frozen=True)
class SFTBatch:
    z0: np.ndarray
    labels: np.ndarray


@dataclass(frozen=True)
class PairBatch:
    z_w: np.ndarray
    z_l: np.ndarray
    labels: np.ndarray


def draw_sft(rng: np.random.Generator, schedule: NoiseSchedule, shape) -> NoiseDraw:
    t = rng.integers(1, schedule.T + 1, size=shape[0])
    return NoiseDraw(t=t, eps=rng.standard_normal(shape, dtype=np.float32))


def draw_pairs(rng: np.random.Generator, schedule: NoiseSchedule, shape, share_noise: bool = False) -> NoiseDraw:
    t = rng.integers(1, schedule.T + 1, size=shape[0])
    eps_w = rng.standard_normal(shape, dtype=np.float32)
    eps_l = eps_w if share_noise else rng.standard_normal(shape, dtype=np.float32)
    return NoiseDraw(t=t, eps_w=eps_w, eps_l=eps_l)


def _record(diag, **values):
    if diag is not None:
        for k, v in values.items():
            diag[k] = float(np.mean(value_of(v)))


# --------------------------------------------------------------------------
# building blocks


def latent_residual(bundle, z0, labels, t, eps, params=None):
    """Per-sample mean ||eps - eps_theta(z_t, t)||^2, shape [N]."""
    zt = q_sample(bundle.schedule, z0, t, eps)
    eps_hat = bundle.predict_noise(zt, t, labels, params=params)
    return ops.mse(eps, eps_hat, per_sample=True)


def pixel_residual(bundle, z0, labels, t, eps, params=None, eps_hat=None):
    """Per-sample mean ||D(z_t) - D(sqrt(abar) z0 + sqrt(1 - abar) eps_theta)||^2, shape [N].

    ``eps_hat`` may be supplied (e.g. a reference model's prediction).
    """
    zt = q_sample(bundle.schedule, z0, t, eps)
    if eps_hat is None:
        eps_hat = bundle.predict_noise(zt, t, labels, params=params)
    target = bundle.decode(zt)
    pred = bundle.decode(q_sample(bundle.schedule, z0, t, eps_hat))
    return ops.mse(target, pred, per_sample=True)


def preference_loss(margin_w, margin_l, beta: float):
    """mean over pairs of -log sigmoid(-beta (margin_w - margin_l))."""
    logits = ops.scale(ops.sub(margin_w, margin_l), -beta)
    return ops.scale(ops.mean(ops.log_sigmoid(logits)), -1.0)


def _require_ref(ref, name):
    if ref is None:
        raise LossError(f"{name} needs a frozen reference bundle")


def _ref_eps(ref, z0, labels, t, eps):
    zt = q_sample(ref.schedule, z0, t, eps)
    return value_of(ref.predict_noise(zt, t, labels))


# --------------------------------------------------------------------------
# SFT objectives


def sft_latent(bundle, batch: SFTBatch, draw: NoiseDraw, params=None, diag=None):
    r = latent_residual(bundle, batch.z0, batch.labels, draw.t, draw.eps, params)
    loss = ops.mean(r)
    _record(diag, latent=loss)
    return loss


def sft_pixel(bundle, batch: SFTBatch, draw: NoiseDraw, params=None, diag=None):
    r = pixel_residual(bundle, batch.z0, batch.labels, draw.t, draw.eps, params)
    loss = ops.mean(r)
    _record(diag, pixel=loss)
    return loss


def sft_combined(bundle, batch: SFTBatch, draw: NoiseDraw, cfg: LossConfig, params=None, diag=None):
    """L_latent + lambda * L_pixel on one shared draw.

    Both terms share the denoiser pass, so eps_theta is evaluated once.
    """
    zt = q_sample(bundle.schedule, batch.z0, draw.t, draw.eps)
    eps_hat = bundle.predict_noise(zt, draw.t, batch.labels, params=params)
    # same reduction order as sft_latent so lambda = 0 reproduces it bit for bit
    latent = ops.mean(ops.mse(draw.eps, eps_hat, per_sample=True))
    pixel = ops.mean(pixel_residual(bundle, batch.z0, batch.labels, draw.t, draw.eps, eps_hat=eps_hat))
    loss = ops.add(latent, ops.scale(pixel, cfg.lam))
    _record(diag, latent=latent, pixel=pixel)
    return loss


def sft_loss(objective: str, bundle, batch, draw, cfg: LossConfig, params=None, diag=None):
    if objective == "latent":
        return sft_latent(bundle, batch, draw, params, diag)
    if objective == "pixel":
        return sft_pixel(bundle, batch, draw, params, diag)
    if objective == "combined":
        return sft_combined(bundle, batch, draw, cfg, params, diag)
    raise LossError(f"unknown SFT objective {objective!r}; expected one of {SFT_OBJECTIVES}")


# --------------------------------------------------------------------------
# preference objectives


def _latent_terms(bundle, pairs: PairBatch, draw: NoiseDraw, params):
    rw = latent_residual(bundle, pairs.z_w, pairs.labels, draw.t, draw.eps_w, params)
    rl = latent_residual(bundle, pairs.z_l, pairs.labels, draw.t, draw.eps_l, params)
    return rw, rl


def _pixel_terms(bundle, pairs: PairBatch, draw: NoiseDraw, params):
    pw = pixel_residual(bundle, pairs.z_w, pairs.labels, draw.t, draw.eps_w, params)
    pl = pixel_residual(bundle, pairs.z_l, pairs.labels, draw.t, draw.eps_l, params)
    return pw, pl


def dpo_latent(bundle, ref, pairs: PairBatch, draw: NoiseDraw, cfg: LossConfig, params=None, diag=None):
    _require_ref(ref, "dpo_latent")
    rw, rl = _latent_terms(bundle, pairs, draw, params)
    ref_w = value_of(latent_residual(ref, pairs.z_w, pairs.labels, draw.t, draw.eps_w))
    ref_l = value_of(latent_residual(ref, pairs.z_l, pairs.labels, draw.t, draw.eps_l))
    dw, dl = ops.sub(rw, ref_w), ops.sub(rl, ref_l)
    loss = preference_loss(dw, dl, cfg.beta)
    _record(diag, dpo_latent=loss, margin_latent=value_of(dw) - value_of(dl))
    return loss


def simpo_latent(bundle, pairs: PairBatch, draw: NoiseDraw, cfg: LossConfig, params=None, diag=None):
    rw, rl = _latent_terms(bundle, pairs, draw, params)
    loss = preference_loss(rw, rl, cfg.beta)
    _record(diag, simpo_latent=loss, margin_latent=value_of(rw) - value_of(rl))
    return loss


def simpo_pixel(bundle, pairs: PairBatch, draw: NoiseDraw, cfg: LossConfig, params=None, diag=None):
    pw, pl = _pixel_terms(bundle, pairs, draw, params)
    loss = preference_loss(pw, pl, cfg.beta)
    _record(diag, simpo_pixel=loss, margin_pixel=value_of(pw) - value_of(pl))
    return loss


def dpo_pixel(bundle, ref, pairs: PairBatch, draw: NoiseDraw, cfg: LossConfig, params=None, diag=None):
    """Pixel analog of the DPO objective: each pixel residual is taken
    relative to the same residual under the reference model's noise."""
    _require_ref(ref, "dpo_pixel")
    pw, pl = _pixel_terms(bundle, pairs, draw, params)
    ew = _ref_eps(ref, pairs.z_w, pairs.labels, draw.t, draw.eps_w)
    el = _ref_eps(ref, pairs.z_l, pairs.labels, draw.t, draw.eps_l)
    ref_w = value_of(pixel_residual(ref, pairs.z_w, pairs.labels, draw.t, draw.eps_w, eps_hat=ew))
    ref_l = value_of(pixel_residual(ref, pairs.z_l, pairs.labels, draw.t, draw.eps_l, eps_hat=el))
    dw, dl = ops.sub(pw, ref_w), ops.sub(pl, ref_l)
    loss = preference_loss(dw, dl, cfg.beta)
    _record(diag, dpo_pixel=loss, margin_pixel=value_of(dw) - value_of(dl))
    return loss


def reward_combined(bundle, ref, pairs: PairBatch, draw: NoiseDraw, cfg: LossConfig, mode: str,
                    params=None, diag=None):
    """Latent preference term + mu * pixel preference term, selected by ``mode``."""
    if mode not in REWARD_MODES:
        raise LossError(f"unknown reward mode {mode!r}; expected one of {REWARD_MODES}")
    needs_ref = mode.startswith("dpo")
    if needs_ref and ref is None:
        raise LossError(f"mode {mode} needs a frozen reference bundle")
    if not needs_ref and ref is not None:
        raise LossError(f"mode {mode} is reference-free but a reference bundle was given")
    if mode == "simpo+simpoPix":
        latent = simpo_latent(bundle, pairs, draw, cfg, params, diag)
    else:
        latent = dpo_latent(bundle, ref, pairs, draw, cfg, params, diag)
    if mode == "dpoOnly":
        return latent
    if mode == "dpo+dpoPix":
        pixel = dpo_pixel(bundle, ref, pairs, draw, cfg, params, diag)
    else:
        pixel = simpo_pixel(bundle, pairs, draw, cfg, params, diag)
    return ops.add(latent, ops.scale(pixel, cfg.mu))


# --------------------------------------------------------------------------
# decoding through the clean-latent estimate


def x0_decode(bundle, z_t, t, eps_hat=None, labels=None, params=None, guard: float = 1e-8):
    """D((z_t - sqrt(1 - abar_t) eps_hat) / sqrt(abar_t)).

    ``eps_hat`` defaults to the bundle's own prediction (label ``labels``).
    """
    ab = bundle.schedule.alpha_bar(t)
    if np.any(ab < guard):
        raise LossError(f"alpha_bar_t = {np.min(ab):.3g} below {guard}; cannot invert to t=0")
    if eps_hat is None:
        if labels is None:
            labels = bundle.den_config.null_class
        eps_hat = bundle.predict_noise(z_t, t, labels, params=params)
    shape = np.shape(value_of(z_t))
    dt = value_of(z_t).dtype
    a = np.asarray(1.0 / np.sqrt(ab), dt)
    s = np.asarray(-np.sqrt(1.0 - ab) / np.sqrt(ab), dt)
    if a.ndim:
        a = a.reshape((-1,) + (1,) * (len(shape) - 1))
        s = s.reshape(a.shape)
    z0_hat = ops.add(ops.mul(z_t, a), ops.mul(eps_hat, s))
    return bundle.decode(z0_hat)
