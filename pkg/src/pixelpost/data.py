"""Procedural image corpus: four pattern families, two quality tiers, and
automatically degraded preference pairs.

Every sample is rendered as ``bg + contrast * (fg - bg) * v(x, y)`` where
``v`` in [0, 1] is the family's structural pattern, so each channel is an
affine function of ``v``. The template classifier in :mod:`pixelpost.metrics`
relies on that.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .ppm import read_ppm, write_ppm
from .spectrum import hf_energy_ratio

FAMILIES = ("checkerboard", "stripes", "rings", "gradient-blobs")
ORIENTATIONS = ("vertical", "horizontal", "diagonal", "antidiagonal")
RING_CENTERS = (13.5, 15.5, 17.5)
MIN_WINNER_HF = 0.02
SPLITS = {"train": 0, "sft": 1, "eval": 2, "pairs": 3}


class CorpusError(ValueError):
    pass


@dataclass(frozen=True)
class CorpusSpec:
    n_train: int = 2048
    n_sft: int = 256
    n_eval: int = 256
    n_pairs: int = 128
    seed: int = 0
    image_size: int = 32
    classes: tuple[str, ...] = FAMILIES
    period_range: tuple[int, int] = (2, 8)
    sft_max_period: int = 4
    contrast_range: tuple[float, float] = (0.5, 1.0)
    blur_sigma: tuple[float, float] = (0.5, 1.5)
    noise_std: tuple[float, float] = (0.0, 0.03)
    block_prob: float = 0.25
    block_size: int = 4

    def validate(self) -> None:
        if any(n < 0 for n in (self.n_train, self.n_sft, self.n_eval, self.n_pairs)):
            raise CorpusError("split sizes must be non-negative")
        if self.image_size % 8:
            raise CorpusError(f"image_size must be a multiple of 8, got {self.image_size}")
        unknown = set(self.classes) - set(FAMILIES)
        if unknown or not self.classes:
            raise CorpusError(f"unknown pattern families {sorted(unknown)}")
        lo, hi = self.period_range
        if not (2 <= lo <= self.sft_max_period <= hi):
            raise CorpusError(f"need 2 <= period_lo <= sft_max_period <= period_hi, got {lo}, "
                              f"{self.sft_max_period}, {hi}")
        c0, c1 = self.contrast_range
        if not (0 < c0 <= c1 <= 1):
            raise CorpusError(f"contrast range must lie in (0, 1], got {self.contrast_range}")
        s0, s1 = self.blur_sigma
        if not (0 < s0 <= s1):
            # pairs must be distinguishable: every loser is blurred by a positive sigma
            raise CorpusError(f"blur sigma range must be positive, got {self.blur_sigma}")
        n0, n1 = self.noise_std
        if not (0 <= n0 <= n1):
            raise CorpusError(f"invalid noise range {self.noise_std}")

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "CorpusSpec":
        d = dict(d)
        for k in ("classes", "period_range", "contrast_range", "blur_sigma", "noise_std"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


@dataclass
class ImageSample:
    pixels: np.ndarray  # [3, H, W] float32 in [0, 1]
    label: int
    tier: str
    generator_params: dict


@dataclass
class PreferencePair:
    winner: ImageSample
    loser: ImageSample
    degradation: dict

    @property
    def label(self) -> int:
        return self.winner.label


@dataclass
class Corpus:
    spec: CorpusSpec
    splits: dict[str, list[ImageSample]] = field(default_factory=dict)
    pairs: list[PreferencePair] = field(default_factory=list)

    def images(self, split: str) -> np.ndarray:
        return np.stack([s.pixels for s in self.splits[split]]).astype(np.float32)

    def labels(self, split: str) -> np.ndarray:
        return np.array([s.label for s in self.splits[split]], dtype=np.int64)

    def pair_arrays(self):
        w = np.stack([p.winner.pixels for p in self.pairs]).astype(np.float32)
        l = np.stack([p.loser.pixels for p in self.pairs]).astype(np.float32)
        return w, l, np.array([p.label for p in self.pairs], dtype=np.int64)


# --------------------------------------------------------------------------
# pattern rendering


def _square(u, period):
    return (np.mod(u, period) < period / 2).astype(np.float64)


def _grid(n):
    y, x = np.mgrid[0:n, 0:n].astype(np.float64)
    return x, y


def render_structure(family: str, params: dict, n: int) -> np.ndarray:
    """The [0, 1]-valued structural pattern of one sample (before colour)."""
    x, y = _grid(n)
    p = params["period"]
    if family == "checkerboard":
        a = _square(x + params["shift_x"], p)
        b = _square(y + params["shift_y"], p)
        return a + b - 2 * a * b
    if family == "stripes":
        u = {"vertical": x, "horizontal": y, "diagonal": x + y, "antidiagonal": x - y}[params["orientation"]]
        return _square(u + params["shift"], p)
    if family == "rings":
        r = np.hypot(x - params["center_x"], y - params["center_y"])
        return _square(r + params["shift"], p)
    if family == "gradient-blobs":
        return _blobs(x, y, params, n)
    raise CorpusError(f"unknown family {family!r}")


def _blob_lattice(x, y, period, sx, sy, n):
    d = 2 * period
    sigma = period / 2
    v = np.zeros_like(x)
    for cy in np.arange(sy - d, n + d, d):
        for cx in np.arange(sx - d, n + d, d):
            v += np.exp(-((x - cx) ** 2 + (y - cy) ** 2) / (2 * sigma ** 2))
    return np.minimum(v, 1.0)


def _blobs(x, y, params, n):
    blob = _blob_lattice(x, y, params["period"], params["shift_x"], params["shift_y"], n)
    gx, gy = params["ramp_x"], params["ramp_y"]
    xn, yn = (2 * x - (n - 1)) / (n - 1), (2 * y - (n - 1)) / (n - 1)
    ramp = 0.5 + 0.5 * (gx * xn + gy * yn) / (abs(gx) + abs(gy))
    a = params["ramp_weight"]
    return (1 - a) * blob + a * ramp


def structural_variants(family: str, period: int) -> list[dict]:
    """All structural parameter settings of a family at one period (no ramp)."""
    if family == "checkerboard":
        return [{"period": period, "shift_x": sx, "shift_y": sy}
                for sx in range(period) for sy in range(period)]
    if family == "stripes":
        # period-2 diagonals are exactly the period-2 checkerboard, so they are left out
        orients = ORIENTATIONS[:2] if period == 2 else ORIENTATIONS
        return [{"period": period, "orientation": o, "shift": s}
                for o in orients for s in range(period)]
    if family == "rings":
        return [{"period": period, "center_x": cx, "center_y": cy, "shift": s}
                for cx in RING_CENTERS for cy in RING_CENTERS for s in range(period)]
    if family == "gradient-blobs":
        return [{"period": period, "shift_x": sx, "shift_y": sy, "ramp_x": 1.0, "ramp_y": 0.0,
                 "ramp_weight": 0.0}
                for sx in range(2 * period) for sy in range(2 * period)]
    raise CorpusError(f"unknown family {family!r}")


def _draw_structure(rng, family, period):
    variants = structural_variants(family, period)
    params = dict(variants[rng.integers(len(variants))])
    if family == "gradient-blobs":
        angle = rng.uniform(0, 2 * np.pi)
        params.update(ramp_x=float(np.cos(angle)), ramp_y=float(np.sin(angle)),
                      ramp_weight=float(rng.uniform(0.2, 0.4)))
    return params


def _draw_colours(rng):
    dark = rng.uniform(0.0, 0.25, size=3)
    light = rng.uniform(0.75, 1.0, size=3)
    if rng.random() < 0.5:
        return dark, light
    return light, dark


def draw_sample(spec: CorpusSpec, rng: np.random.Generator, label: int, tier: str) -> ImageSample:
    family = spec.classes[label]
    lo, hi = spec.period_range
    if tier == "high_quality":
        period = int(rng.integers(lo, spec.sft_max_period + 1))
        contrast = 1.0
    else:
        period = int(rng.integers(lo, hi + 1))
        contrast = float(rng.uniform(*spec.contrast_range))
    structure = _draw_structure(rng, family, period)
    bg, fg = _draw_colours(rng)
    v = render_structure(family, structure, spec.image_size)
    pixels = bg[:, None, None] + contrast * (fg - bg)[:, None, None] * v[None]
    params = {"family": family, **structure, "contrast": contrast,
              "background": bg.tolist(), "foreground": fg.tolist()}
    return ImageSample(pixels.astype(np.float32), label, tier, params)


def _rng(spec: CorpusSpec, split: str, index: int) -> np.random.Generator:
    # per-sample streams: parallel and serial generation agree, splits never share seeds
    return np.random.default_rng([spec.seed, SPLITS[split], index])


def generate_split(spec: CorpusSpec, split: str, n: int) -> list[ImageSample]:
    tier = "high_quality" if split == "sft" else "base"
    return [draw_sample(spec, _rng(spec, split, i), i % spec.num_classes, tier) for i in range(n)]


def generate_corpus(spec: CorpusSpec) -> Corpus:
    spec.validate()
    splits = {
        "train": generate_split(spec, "train", spec.n_train),
        "sft": generate_split(spec, "sft", spec.n_sft),
        "eval": generate_split(spec, "eval", spec.n_eval),
    }
    return Corpus(spec, splits, generate_pairs(spec))


# --------------------------------------------------------------------------
# degradations and preference pairs


def _blur(pixels, sigma):
    # circular blur multiplies the spectrum by a kernel decreasing in radius,
    # so it can only lower the top-band share (reflect padding adds seams)
    return np.stack([gaussian_filter(c, sigma, mode="wrap") for c in np.asarray(pixels, np.float64)])


def degrade(pixels: np.ndarray, rng: np.random.Generator, spec: CorpusSpec) -> tuple[np.ndarray, dict]:
    sigma = float(rng.uniform(*spec.blur_sigma))
    noise = float(rng.uniform(*spec.noise_std))
    block = bool(rng.random() < spec.block_prob)
    out = _blur(pixels, sigma)
    if block:
        b = spec.block_size
        c, h, w = out.shape
        coarse = out.reshape(c, h // b, b, w // b, b).mean(axis=(2, 4))
        out = 0.5 * out + 0.5 * np.repeat(np.repeat(coarse, b, axis=1), b, axis=2)
    if noise > 0:
        out = out + rng.normal(scale=noise, size=out.shape)
    out = np.clip(out, 0.0, 1.0)
    return out.astype(np.float32), {"blur_sigma": sigma, "noise_std": noise, "block": block}


def make_pair(spec: CorpusSpec, rng: np.random.Generator, label: int) -> PreferencePair:
    # blur can only shift the top-band share if energy sits on both sides of
    # the band edge: an axis-aligned period-4 pattern has none in the top band,
    # a period-2 one has all of it there
    while True:
        winner = draw_sample(spec, rng, label, "high_quality")
        hf_w = hf_energy_ratio(winner.pixels)
        if MIN_WINNER_HF <= hf_w <= 1 - MIN_WINNER_HF:
            break
    loser_px, deg = degrade(winner.pixels, rng, spec)
    if hf_energy_ratio(loser_px) >= hf_w:
        # noise can put energy back into the top band; fall back to the blur alone
        sigma = deg["blur_sigma"]
        loser_px = np.clip(_blur(winner.pixels, sigma), 0.0, 1.0).astype(np.float32)
        deg = {"blur_sigma": sigma, "noise_std": 0.0, "block": False}
    loser = ImageSample(loser_px, label, "degraded", dict(winner.generator_params))
    return PreferencePair(winner, loser, deg)


def generate_pairs(spec: CorpusSpec) -> list[PreferencePair]:
    spec.validate()
    return [make_pair(spec, _rng(spec, "pairs", i), i % spec.num_classes) for i in range(spec.n_pairs)]


# --------------------------------------------------------------------------
# persistence: PPM images + JSON manifest


def save_corpus(corpus: Corpus, directory) -> Path:
    root = Path(directory)
    (root / "images").mkdir(parents=True, exist_ok=True)
    entries = []
    for split, samples in corpus.splits.items():
        for i, s in enumerate(samples):
            name = f"{split}_{i:05d}.ppm"
            write_ppm(root / "images" / name, s.pixels)
            entries.append({"id": name, "split": split, "label": s.label, "tier": s.tier,
                            "generator_params": s.generator_params})
    for i, p in enumerate(corpus.pairs):
        wn, ln = f"pair_{i:05d}_w.ppm", f"pair_{i:05d}_l.ppm"
        write_ppm(root / "images" / wn, p.winner.pixels)
        write_ppm(root / "images" / ln, p.loser.pixels)
        entries.append({"id": wn, "split": "pairs", "role": "winner", "pair": i, "label": p.label,
                        "tier": p.winner.tier, "generator_params": p.winner.generator_params})
        entries.append({"id": ln, "split": "pairs", "role": "loser", "pair": i, "label": p.label,
                        "tier": p.loser.tier, "generator_params": p.loser.generator_params,
                        "degradation": p.degradation})
    manifest = {"format": "pixelpost-corpus/1", "spec": corpus.spec.to_dict(), "samples": entries}
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return root


def load_corpus(directory) -> Corpus:
    root = Path(directory)
    mpath = root / "manifest.json"
    if not mpath.exists():
        raise CorpusError(f"no corpus manifest at {mpath}")
    manifest = json.loads(mpath.read_text())
    spec = CorpusSpec.from_dict(manifest["spec"])
    corpus = Corpus(spec, {"train": [], "sft": [], "eval": []})
    winners, losers = {}, {}
    for e in manifest["samples"]:
        px = read_ppm(root / "images" / e["id"])
        sample = ImageSample(px, e["label"], e["tier"], e["generator_params"])
        if e["split"] == "pairs":
            if e["role"] == "winner":
                winners[e["pair"]] = sample
            else:
                losers[e["pair"]] = (sample, e["degradation"])
        else:
            corpus.splits[e["split"]].append(sample)
    corpus.pairs = [PreferencePair(winners[i], losers[i][0], losers[i][1]) for i in sorted(winners)]
    return corpus
