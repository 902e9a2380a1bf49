"""Training loops, Adam, and the LDPX checkpoint container."""

from __future__ import annotations

import csv
import json
import math
import struct
import time
import zlib
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from .diffkit import evaluate, gradient, ops
from .diffkit.core import value_of
from .losses import (
    REWARD_MODES,
    SFT_OBJECTIVES,
    LossConfig,
    PairBatch,
    SFTBatch,
    draw_pairs,
    draw_sft,
    reward_combined,
    sft_loss,
)
from .models import ModelBundle, clone_frozen, param_checksum

PHASES = ("pretrain_ae", "pretrain_diffusion", "sft", "preference")
LR_SCHEDULES = ("constant", "cosine")
MAGIC = b"LDPX"
VERSION = 1
LOG_TERMS = ("latent", "pixel", "dpo_latent", "simpo_latent", "dpo_pixel", "simpo_pixel",
             "margin_latent", "margin_pixel")


class TrainingError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


# --------------------------------------------------------------------------
# Adam with decoupled weight decay


@dataclass
class OptimizerState:
    m: dict
    v: dict
    step: int = 0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 5e-6

    def scalars(self) -> dict:
        return {k: getattr(self, k) for k in ("step", "lr", "beta1", "beta2", "eps", "weight_decay")}


def adam_init(params: dict, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=5e-6) -> OptimizerState:
    return OptimizerState({k: np.zeros_like(v) for k, v in params.items()},
                          {k: np.zeros_like(v) for k, v in params.items()},
                          0, lr, beta1, beta2, eps, weight_decay)


def adam_step(opt: OptimizerState, params: dict, grads: dict) -> dict:
    """One bias-corrected Adam update followed by p <- p (1 - lr wd).

    Updates ``opt`` in place and returns new parameter arrays (the inputs are
    not written, so frozen or shared arrays stay intact).
    """
    opt.step += 1
    b1, b2 = opt.beta1, opt.beta2
    c1 = 1.0 - b1 ** opt.step
    c2 = 1.0 - b2 ** opt.step
    out = {}
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape:
            raise TrainingError(f"adam_step: grad shape {g.shape} != param shape {p.shape} for {k}")
        dt = p.dtype
        opt.m[k] = (b1 * opt.m[k] + (1 - b1) * g).astype(dt)
        opt.v[k] = (b2 * opt.v[k] + (1 - b2) * g * g).astype(dt)
        update = (opt.m[k] / c1) / (np.sqrt(opt.v[k] / c2) + opt.eps)
        new = p - opt.lr * update
        if opt.weight_decay:
            new = new * (1.0 - opt.lr * opt.weight_decay)
        out[k] = new.astype(dt)
    return out


# --------------------------------------------------------------------------
# run configuration


@dataclass
class RunConfig:
    phase: str = "sft"
    objective: str = "latent"  # sft: latent|pixel|combined; preference: a reward mode
    lam: float = 8.0
    mu: float = 8.0
    beta: float = 500.0
    share_noise: bool = False
    epochs: int = 140
    batch_size: int = 16
    lr: float = 1e-4
    weight_decay: float = 5e-6
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    cond_dropout: float = 0.1
    lr_schedule: str = "constant"  # or "cosine": decays to 0 over the run
    seed: int = 0
    checkpoint_every: int = 0  # epochs; 0 = only at the end
    max_steps: int = 0  # 0 = run all epochs
    out_dir: str = ""
    run_id: str = ""

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.phase not in PHASES:
            raise TrainingError(f"unknown phase {self.phase!r}; expected one of {PHASES}")
        if self.phase == "sft" and self.objective not in SFT_OBJECTIVES:
            raise TrainingError(f"sft objective must be one of {SFT_OBJECTIVES}, got {self.objective!r}")
        if self.phase == "preference" and self.objective not in REWARD_MODES:
            raise TrainingError(f"preference objective must be one of {REWARD_MODES}, got {self.objective!r}")
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0:
            raise TrainingError("epochs >= 0, batch_size >= 1 and lr > 0 required")
        if self.lr_schedule not in LR_SCHEDULES:
            raise TrainingError(f"lr_schedule must be one of {LR_SCHEDULES}, got {self.lr_schedule!r}")
        if not 0 <= self.cond_dropout < 1:
            raise TrainingError(f"cond_dropout must lie in [0, 1), got {self.cond_dropout}")
        LossConfig(self.lam, self.mu, self.beta, self.share_noise)

    @property
    def loss_config(self) -> LossConfig:
        return LossConfig(self.lam, self.mu, self.beta, self.share_noise)

    def lr_at(self, step: int, total: int) -> float:
        """Learning rate for 0-based ``step`` of a run of ``total`` steps."""
        if self.lr_schedule == "constant" or total <= 0:
            return self.lr
        return 0.5 * self.lr * (1.0 + math.cos(math.pi * min(step, total) / total))

    @property
    def needs_reference(self) -> bool:
        return self.phase == "preference" and self.objective.startswith("dpo")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise TrainingError(f"unknown run config keys {sorted(unknown)}")
        return cls(**d)


@dataclass
class PhaseData:
    """Inputs of one phase: images (autoencoder), latents + labels, or pairs."""

    images: np.ndarray | None = None
    latents: np.ndarray | None = None
    labels: np.ndarray | None = None
    winners: np.ndarray | None = None
    losers: np.ndarray | None = None

    def __len__(self):
        for x in (self.images, self.latents, self.winners):
            if x is not None:
                return len(x)
        return 0


def encode_dataset(bundle: ModelBundle, images: np.ndarray, batch: int = 128) -> np.ndarray:
    return np.concatenate([value_of(bundle.encode(images[i:i + batch]))
                           for i in range(0, len(images), batch)]).astype(np.float32)


# --------------------------------------------------------------------------
# training state and checkpoints


@dataclass
class TrainState:
    bundle: ModelBundle
    config: RunConfig
    opt: OptimizerState
    rng: np.random.Generator
    ref: ModelBundle | None = None
    epoch: int = 0
    batch_in_epoch: int = 0
    perm: np.ndarray | None = None
    metrics_rows: int = 0
    log: list = field(default_factory=list)

    @property
    def trainable(self) -> dict:
        return self.bundle.autoencoder if self.config.phase == "pretrain_ae" else self.bundle.denoiser


def _trainable_keys(bundle, phase):
    if phase == "pretrain_ae":
        return [k for k in bundle.autoencoder if k != "latent_scale"]
    return list(bundle.denoiser)


def start_state(config: RunConfig, bundle: ModelBundle) -> TrainState:
    keys = _trainable_keys(bundle, config.phase)
    src = bundle.autoencoder if config.phase == "pretrain_ae" else bundle.denoiser
    opt = adam_init({k: src[k] for k in keys}, config.lr, config.adam_beta1, config.adam_beta2,
                    config.adam_eps, config.weight_decay)
    # the reference is the model as it stands when the phase starts
    ref = clone_frozen(bundle) if config.needs_reference else None
    return TrainState(bundle, config, opt, np.random.default_rng(config.seed), ref)


def _pack_tensors(buf: bytearray, tensors: dict):
    buf += struct.pack("<I", len(tensors))
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise CheckpointError(f"tensor name too long: {name[:40]}...")
        buf += struct.pack("<H", len(raw)) + raw
        buf += struct.pack("<B", arr.ndim)
        buf += struct.pack(f"<{arr.ndim}I", *arr.shape)
        buf += arr.tobytes()


def encode_checkpoint(tensors: dict, meta: dict) -> bytes:
    buf = bytearray(MAGIC)
    buf += struct.pack("<I", VERSION)
    _pack_tensors(buf, tensors)
    js = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    buf += struct.pack("<I", len(js)) + js
    buf += struct.pack("<I", zlib.crc32(bytes(buf)) & 0xFFFFFFFF)
    return bytes(buf)


def decode_checkpoint(data: bytes) -> tuple[dict, dict]:
    if len(data) < 16 or data[:4] != MAGIC:
        raise CheckpointError("not an LDPX checkpoint (bad magic)")
    body, tail = data[:-4], data[-4:]
    if struct.unpack("<I", tail)[0] != zlib.crc32(body) & 0xFFFFFFFF:
        raise CheckpointError("checkpoint checksum mismatch (corrupt or truncated file)")
    version = struct.unpack_from("<I", body, 4)[0]
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    pos = 8
    try:
        (count,) = struct.unpack_from("<I", body, pos)
        pos += 4
        tensors = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", body, pos)
            pos += 2
            name = body[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (ndim,) = struct.unpack_from("<B", body, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", body, pos)
            pos += 4 * ndim
            size = int(np.prod(shape, dtype=np.int64))
            arr = np.frombuffer(body, dtype="<f4", count=size, offset=pos).reshape(shape)
            tensors[name] = arr.astype(np.float32)
            pos += 4 * size
        (jlen,) = struct.unpack_from("<I", body, pos)
        pos += 4
        meta = json.loads(body[pos:pos + jlen].decode("utf-8"))
        pos += jlen
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"malformed checkpoint: {exc}") from None
    if pos != len(body):
        raise CheckpointError("trailing bytes after checkpoint metadata")
    return tensors, meta


def state_tensors(state: TrainState) -> dict:
    tensors = dict(state.bundle.state_dict())
    for k in state.opt.m:
        tensors[f"opt/m/{k}"] = state.opt.m[k]
        tensors[f"opt/v/{k}"] = state.opt.v[k]
    if state.ref is not None:
        tensors.update({f"ref/{k}": v for k, v in state.ref.denoiser.items()})
    if state.perm is not None:
        # permutation indices are exact in f32 up to 2^24 samples
        tensors["run/perm"] = state.perm.astype(np.float32)
    return tensors


def state_meta(state: TrainState) -> dict:
    return {
        "format": "pixelpost-checkpoint",
        "model": state.bundle.configs(),
        "run": state.config.to_dict(),
        "optimizer": state.opt.scalars(),
        "rng": state.rng.bit_generator.state,
        "cursor": {"epoch": state.epoch, "batch": state.batch_in_epoch, "metrics_rows": state.metrics_rows},
    }


def save_checkpoint(state: TrainState, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode_checkpoint(state_tensors(state), state_meta(state)))
    tmp.replace(path)
    return path


def save_bundle(bundle: ModelBundle, path, extra: dict | None = None) -> Path:
    """A model-only checkpoint (no optimizer or run state)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {"format": "pixelpost-checkpoint", "model": bundle.configs(), **(extra or {})}
    path.write_bytes(encode_checkpoint(bundle.state_dict(), meta))
    return path


def load_checkpoint(path) -> tuple[dict, dict]:
    p = Path(path)
    if not p.exists():
        raise CheckpointError(f"checkpoint not found: {p}")
    return decode_checkpoint(p.read_bytes())


def load_bundle(path) -> ModelBundle:
    tensors, meta = load_checkpoint(path)
    return ModelBundle.from_state(meta["model"], tensors)


def restore_state(path) -> TrainState:
    tensors, meta = load_checkpoint(path)
    if "run" not in meta:
        raise CheckpointError(f"{path} is a model-only checkpoint; it cannot resume a run")
    bundle = ModelBundle.from_state(meta["model"], tensors)
    config = RunConfig.from_dict(meta["run"])
    sc = meta["optimizer"]
    keys = _trainable_keys(bundle, config.phase)
    opt = OptimizerState({k: tensors[f"opt/m/{k}"] for k in keys}, {k: tensors[f"opt/v/{k}"] for k in keys},
                         sc["step"], sc["lr"], sc["beta1"], sc["beta2"], sc["eps"], sc["weight_decay"])
    rng = np.random.default_rng()
    rng.bit_generator.state = meta["rng"]
    ref = None
    ref_den = {k[4:]: v for k, v in tensors.items() if k.startswith("ref/")}
    if ref_den:
        ref = clone_frozen(bundle.with_denoiser(ref_den))
    perm = tensors["run/perm"].astype(np.int64) if "run/perm" in tensors else None
    cur = meta["cursor"]
    return TrainState(bundle, config, opt, rng, ref, cur["epoch"], cur["batch"], perm, cur["metrics_rows"])


# --------------------------------------------------------------------------
# metrics stream


class MetricsLog:
    """Append-only CSV of per-step records (kept in memory when no path is set)."""

    columns = ("step", "epoch", "phase", "loss", *LOG_TERMS, "recon", "wall_clock")

    def __init__(self, path=None, keep_rows: int = 0):
        self.path = Path(path) if path else None
        self.rows: list[dict] = []
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            kept = []
            if keep_rows and self.path.exists():
                with self.path.open() as f:
                    kept = list(csv.DictReader(f))[:keep_rows]
            with self.path.open("w", newline="") as f:
                w = csv.DictWriter(f, self.columns)
                w.writeheader()
                w.writerows(kept)
            self.rows = kept

    def append(self, row: dict):
        row = {k: row.get(k, "") for k in self.columns}
        self.rows.append(row)
        if self.path:
            with self.path.open("a", newline="") as f:
                csv.DictWriter(f, self.columns).writerow(row)


def read_metrics(path) -> list[dict]:
    with Path(path).open() as f:
        return list(csv.DictReader(f))


# --------------------------------------------------------------------------
# the training loop


def _drop_labels(rng, labels, p, null):
    if p <= 0:
        return labels
    drop = rng.random(len(labels)) < p
    return np.where(drop, null, labels)


def _step_loss(state: TrainState, data: PhaseData, idx: np.ndarray, diag: dict):
    cfg, bundle = state.config, state.bundle
    rng = state.rng
    null = bundle.den_config.null_class
    if cfg.phase == "pretrain_ae":
        x = data.images[idx]
        fixed = {"latent_scale": bundle.autoencoder["latent_scale"]}

        def fn(p):
            q = dict(p, **fixed)
            return ops.mse(bundle.decode(bundle.encode(x, params=q), params=q), x)

        return fn
    if cfg.phase in ("pretrain_diffusion", "sft"):
        z0 = data.latents[idx]
        labels = _drop_labels(rng, data.labels[idx], cfg.cond_dropout, null)
        draw = draw_sft(rng, bundle.schedule, z0.shape)
        objective = "latent" if cfg.phase == "pretrain_diffusion" else cfg.objective
        batch = SFTBatch(z0, labels)
        return lambda p: sft_loss(objective, bundle, batch, draw, cfg.loss_config, params=p, diag=diag)
    zw, zl = data.winners[idx], data.losers[idx]
    labels = _drop_labels(rng, data.labels[idx], cfg.cond_dropout, null)
    draw = draw_pairs(rng, bundle.schedule, zw.shape, cfg.share_noise)
    pairs = PairBatch(zw, zl, labels)
    return lambda p: reward_combined(bundle, state.ref, pairs, draw, cfg.loss_config, cfg.objective,
                                     params=p, diag=diag)


def _dump_batch(state, idx, loss):
    out = Path(state.config.out_dir or ".") / f"nan_step{state.opt.step + 1}.npz"
    out.parent.mkdir(parents=True, exist_ok=True)
    np.savez(out, indices=idx, loss=np.asarray(loss), rng_state=json.dumps(state.rng.bit_generator.state))
    return out


def train_steps(state: TrainState, data: PhaseData, metrics: MetricsLog,
                checkpoint_path=None, stop_after: int | None = None,
                on_epoch: Callable[[TrainState], None] | None = None) -> TrainState:
    """Advance ``state`` through its remaining epochs (or ``stop_after`` steps)."""
    cfg = state.config
    n = len(data)
    if n == 0:
        raise TrainingError(f"phase {cfg.phase} has an empty dataset")
    if cfg.phase == "preference" and data.winners is None:
        raise TrainingError("preference phase needs a pair dataset")
    if cfg.needs_reference and state.ref is None:
        raise TrainingError(f"mode {cfg.objective} needs a reference snapshot")
    ref_sum = param_checksum(state.ref.denoiser) if state.ref is not None else None
    nb = -(-n // cfg.batch_size)
    total = cfg.epochs * nb if not cfg.max_steps else min(cfg.max_steps, cfg.epochs * nb)
    keys = _trainable_keys(state.bundle, cfg.phase)
    t0 = time.perf_counter()
    taken = 0
    while state.epoch < cfg.epochs:
        if state.perm is None:
            state.perm = state.rng.permutation(n)
        while state.batch_in_epoch < nb:
            if (cfg.max_steps and state.opt.step >= cfg.max_steps) or (stop_after is not None and taken >= stop_after):
                return state
            b = state.batch_in_epoch
            idx = state.perm[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            diag = {}
            fn = _step_loss(state, data, idx, diag)
            src = state.trainable
            value, trace = evaluate(fn, params={k: src[k] for k in keys})
            loss = float(value)
            if not np.isfinite(loss):
                dump = _dump_batch(state, idx, loss)
                raise TrainingError(f"non-finite loss {loss} at step {state.opt.step + 1}; batch dumped to {dump}")
            grads = gradient(trace)
            state.opt.lr = cfg.lr_at(state.opt.step, total)
            new = adam_step(state.opt, {k: src[k] for k in keys}, grads)
            src.update(new)
            row = {"step": state.opt.step, "epoch": state.epoch, "phase": cfg.phase, "loss": repr(loss),
                   "wall_clock": f"{time.perf_counter() - t0:.3f}"}
            if cfg.phase == "pretrain_ae":
                row["recon"] = repr(loss)
            row.update({k: repr(v) for k, v in diag.items()})
            metrics.append(row)
            state.metrics_rows += 1
            state.batch_in_epoch += 1
            taken += 1
        state.epoch += 1
        state.batch_in_epoch = 0
        state.perm = None
        if ref_sum is not None and param_checksum(state.ref.denoiser) != ref_sum:
            raise TrainingError("reference model changed during the preference phase")
        if on_epoch:
            on_epoch(state)
        if checkpoint_path and cfg.checkpoint_every and state.epoch % cfg.checkpoint_every == 0:
            save_checkpoint(state, checkpoint_path)
    if cfg.phase == "pretrain_ae":
        calibrate_latent_scale(state.bundle, data.images)
    return state


def calibrate_latent_scale(bundle: ModelBundle, images: np.ndarray) -> float:
    """Rescale latents to unit standard deviation over ``images``."""
    bundle.autoencoder["latent_scale"] = np.ones(1, np.float32)
    z = encode_dataset(bundle, images)
    s = np.float32(1.0 / max(float(z.std()), 1e-6))
    bundle.autoencoder["latent_scale"] = np.array([s], np.float32)
    return float(s)


def run_phase(config: RunConfig, bundle: ModelBundle, data: PhaseData, metrics_path=None,
              checkpoint_path=None) -> tuple[ModelBundle, list[dict]]:
    """Train ``bundle`` in place for one phase; returns it with the metrics rows."""
    state = start_state(config, bundle)
    metrics = MetricsLog(metrics_path)
    state = train_steps(state, data, metrics, checkpoint_path)
    if checkpoint_path:
        save_checkpoint(state, checkpoint_path)
    return state.bundle, metrics.rows


def resume_phase(checkpoint_path, data: PhaseData, metrics_path=None) -> tuple[ModelBundle, list[dict]]:
    state = restore_state(checkpoint_path)
    metrics = MetricsLog(metrics_path, keep_rows=state.metrics_rows)
    state = train_steps(state, data, metrics, checkpoint_path)
    save_checkpoint(state, checkpoint_path)
    return state.bundle, metrics.rows
