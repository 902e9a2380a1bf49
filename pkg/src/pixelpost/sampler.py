"""Deterministic DDIM (eta = 0) sampling with classifier-free guidance."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .diffkit.core import value_of
from .ppm import write_ppm


class SamplerError(ValueError):
    pass


@dataclass(frozen=True)
class SamplerConfig:
    num_steps: int = 50
    guidance_scale: float = 3.0
    eta: float = 0.0

    def __post_init__(self):
        if self.num_steps < 1:
            raise SamplerError(f"num_steps must be >= 1, got {self.num_steps}")
        if self.eta != 0.0:
            raise SamplerError("only deterministic DDIM (eta = 0) is supported")

    def to_dict(self):
        return asdict(self)


def timestep_sequence(T: int, num_steps: int) -> np.ndarray:
    """Uniform-stride subsequence T = tau_1 > tau_2 > ... > tau_n >= 1."""
    if not 1 <= num_steps <= T:
        raise SamplerError(f"num_steps must lie in [1, {T}], got {num_steps}")
    return T - (np.arange(num_steps) * T) // num_steps


def cfg_predict(bundle, z_t, t, label, s: float):
    """eps(z, t, null) + s * (eps(z, t, label) - eps(z, t, null))."""
    n = np.shape(z_t)[0]
    label = np.broadcast_to(np.asarray(label, dtype=np.int64), (n,))
    if label.min() < 0 or label.max() >= bundle.den_config.num_classes:
        raise SamplerError(f"label must be a dataset class in [0, {bundle.den_config.num_classes})")
    null = np.full(n, bundle.den_config.null_class)
    if s == 0.0:
        return value_of(bundle.predict_noise(z_t, t, null))
    if s == 1.0:
        return value_of(bundle.predict_noise(z_t, t, label))
    # one batched pass over [cond; uncond]
    both = value_of(bundle.predict_noise(np.concatenate([z_t, z_t]), np.concatenate([np.broadcast_to(t, (n,))] * 2),
                                         np.concatenate([label, null])))
    cond, uncond = both[:n], both[n:]
    return uncond + np.asarray(s, both.dtype) * (cond - uncond)


def ddim_step(schedule, z_t, t, t_next, eps_hat):
    """One eta = 0 update from t to t_next (t_next = 0 returns the clean estimate)."""
    ab = schedule.alpha_bar(t)
    ab_next = schedule.alpha_bar(t_next)
    z0_hat = (z_t - np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(ab)
    return (np.sqrt(ab_next) * z0_hat + np.sqrt(1.0 - ab_next) * eps_hat).astype(z_t.dtype)


def ddim_latents(schedule, predict, z_T: np.ndarray, num_steps: int) -> np.ndarray:
    """Run DDIM from z_T with an arbitrary ``predict(z_t, t) -> eps_hat``."""
    seq = timestep_sequence(schedule.T, num_steps)
    z = z_T
    for i, t in enumerate(seq):
        t_next = seq[i + 1] if i + 1 < len(seq) else 0
        z = ddim_step(schedule, z, int(t), int(t_next), predict(z, int(t)))
    return z


def initial_noise(bundle, seed: int, n: int) -> np.ndarray:
    shape = (n,) + bundle.ae_config.latent_shape
    return np.random.default_rng([seed, 0xD1]).standard_normal(shape, dtype=np.float32)


def ddim_sample_latents(bundle, cfg: SamplerConfig, labels, seed: int) -> np.ndarray:
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    z_T = initial_noise(bundle, seed, len(labels))
    return ddim_latents(bundle.schedule, lambda z, t: cfg_predict(bundle, z, t, labels, cfg.guidance_scale),
                        z_T, cfg.num_steps)


def ddim_sample(bundle, cfg: SamplerConfig, labels, seed: int) -> np.ndarray:
    """Images [N, 3, H, W] for the given labels; a pure function of its arguments."""
    return value_of(bundle.decode(ddim_sample_latents(bundle, cfg, labels, seed)))


def sample_classes(bundle, cfg: SamplerConfig, n_per_class: int, seed: int, batch: int = 64):
    """n_per_class samples of every class; returns (images, labels)."""
    labels = np.repeat(np.arange(bundle.den_config.num_classes), n_per_class)
    images = [ddim_sample(bundle, cfg, labels[i:i + batch], seed + i) for i in range(0, len(labels), batch)]
    return np.concatenate(images), labels


def write_samples(directory, run_id: str, images, labels, seed: int, num_steps: int) -> list[Path]:
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, (img, lab) in enumerate(zip(images, labels)):
        p = root / f"{run_id}_s{seed}_c{int(lab)}_n{num_steps}_{i:04d}.ppm"
        write_ppm(p, img)
        paths.append(p)
    return paths
