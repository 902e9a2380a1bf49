"""Radial power spectra and the high-frequency energy fraction."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class SpectrumReport:
    power: np.ndarray  # mean |F|^2 per integer-radius bin, channel-averaged
    energy: np.ndarray  # summed |F|^2 per bin
    hf_energy_ratio: float

    @property
    def n_bins(self) -> int:
        return len(self.power)


def radial_bins(n: int) -> np.ndarray:
    """Integer radius of every FFT coefficient of an n x n image.

    Radii past Nyquist (the corners) fold into the last bin, so bins
    0..n//2 partition the coefficients exactly.
    """
    k = np.fft.fftfreq(n) * n
    r = np.rint(np.hypot(k[:, None], k[None, :])).astype(np.int64)
    return np.minimum(r, n // 2)


def hf_start(n_bins: int) -> int:
    return n_bins - n_bins // 3


def radial_spectrum(image: np.ndarray) -> SpectrumReport:
    """Spectrum of a [C, H, W] (or [H, W]) square image.

    hf_energy_ratio is the energy in the top third of radial bins over all
    non-DC energy, which makes it invariant to offsets and global scaling;
    a constant image reports 0.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[None]
    if img.ndim != 3 or img.shape[1] != img.shape[2]:
        raise ValueError(f"radial_spectrum needs a square image, got {np.shape(image)}")
    n = img.shape[-1]
    p = (np.abs(np.fft.fft2(img)) ** 2).mean(axis=0)
    bins = radial_bins(n)
    nb = n // 2 + 1
    energy = np.bincount(bins.ravel(), weights=p.ravel(), minlength=nb)
    counts = np.bincount(bins.ravel(), minlength=nb)
    total = energy[1:].sum()
    ratio = float(energy[hf_start(nb):].sum() / total) if total > 1e-12 * n * n else 0.0
    return SpectrumReport(energy / counts, energy, ratio)


def hf_energy_ratio(image: np.ndarray) -> float:
    return radial_spectrum(image).hf_energy_ratio


def mean_hf_ratio(images) -> float:
    return float(np.mean([hf_energy_ratio(im) for im in images]))
