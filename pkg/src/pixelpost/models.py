"""Autoencoder and denoiser backbones built from the diffkit catalog.

Every forward function takes a flat ``{name: tensor}`` parameter dict whose
values may be plain arrays (inference) or traced nodes (training), so the
same code serves both paths.
"""

from __future__ import annotations

import copy
import hashlib
from dataclasses import asdict, dataclass, field, replace
from typing import Callable

import numpy as np

from .diffkit import ops
from .diffkit.core import value_of
from .schedule import NoiseSchedule, linear_schedule


class ModelError(ValueError):
    pass


# --------------------------------------------------------------------------
# configs


@dataclass(frozen=True)
class AutoencoderConfig:
    image_size: int = 32
    image_channels: int = 3
    latent_channels: int = 4
    downsample_factor: int = 8
    base_width: int = 16
    hidden: int = 512  # width of the global dense path at the bottleneck; 0 disables it
    variant: str = "conv"

    @property
    def latent_size(self) -> int:
        if self.variant == "identity":
            return self.image_size
        if self.image_size % self.downsample_factor:
            raise ModelError(f"image_size {self.image_size} not divisible by {self.downsample_factor}")
        return self.image_size // self.downsample_factor

    @property
    def latent_shape(self) -> tuple[int, int, int]:
        c = self.image_channels if self.variant == "identity" else self.latent_channels
        return (c, self.latent_size, self.latent_size)

    @property
    def compression_ratio(self) -> float:
        c, h, w = self.latent_shape
        return self.image_size ** 2 * self.image_channels / (c * h * w)

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class DenoiserConfig:
    variant: str = "dit"
    num_classes: int = 4  # dataset labels; index num_classes is the null class
    latent_channels: int = 4
    latent_size: int = 4
    width: int = 128
    depth: int = 4
    heads: int = 4
    patch: int = 1
    base_width: int = 64
    groups: int = 8
    time_embed_dim: int = 128

    @property
    def null_class(self) -> int:
        return self.num_classes

    def to_dict(self):
        return asdict(self)


def _dense_init(rng, n_in, n_out, gain=1.0):
    w = rng.normal(scale=gain / np.sqrt(n_in), size=(n_in, n_out))
    return w.astype(np.float32), np.zeros(n_out, np.float32)


def _conv_init(rng, c_out, c_in, k, gain=1.0):
    w = rng.normal(scale=gain / np.sqrt(c_in * k * k), size=(c_out, c_in, k, k))
    return w.astype(np.float32), np.zeros(c_out, np.float32)


def _convt_init(rng, c_in, c_out, k, stride, gain=1.0):
    # each output pixel receives about c_in * (k / stride)^2 taps
    fan = c_in * (k // stride) ** 2
    w = rng.normal(scale=gain / np.sqrt(fan), size=(c_in, c_out, k, k))
    return w.astype(np.float32), np.zeros(c_out, np.float32)


# --------------------------------------------------------------------------
# autoencoders


def _ae_widths(cfg):
    b = cfg.base_width
    return [b, 2 * b, 4 * b]


def conv_ae_init(cfg: AutoencoderConfig, rng) -> dict:
    p = {}
    widths = _ae_widths(cfg)
    gain = np.sqrt(2.0)
    p["enc/in/w"], p["enc/in/b"] = _conv_init(rng, widths[0], cfg.image_channels, 3, gain)
    c = widths[0]
    for i, w in enumerate(widths):
        p[f"enc/down{i}/w"], p[f"enc/down{i}/b"] = _conv_init(rng, w, c, 3, gain)
        c = w
    p["enc/out/w"], p["enc/out/b"] = _conv_init(rng, cfg.latent_channels, c, 1)
    p["dec/in/w"], p["dec/in/b"] = _conv_init(rng, widths[-1], cfg.latent_channels, 3, gain)
    c = widths[-1]
    for i, w in enumerate(reversed(widths)):
        p[f"dec/up{i}/w"], p[f"dec/up{i}/b"] = _convt_init(rng, c, w, 4, 2, gain)
        c = w
    p["dec/out/w"], p["dec/out/b"] = _conv_init(rng, cfg.image_channels, c, 3)
    if cfg.hidden:
        # a dense path through the bottleneck lets every latent cell see the whole image
        n_feat = widths[-1] * cfg.latent_size ** 2
        n_lat = int(np.prod(cfg.latent_shape))
        p["enc/mix1/w"], p["enc/mix1/b"] = _dense_init(rng, n_feat, cfg.hidden, gain)
        p["enc/mix2/w"], p["enc/mix2/b"] = _dense_init(rng, cfg.hidden, n_lat, 0.5)
        p["dec/mix1/w"], p["dec/mix1/b"] = _dense_init(rng, n_lat, cfg.hidden, gain)
        p["dec/mix2/w"], p["dec/mix2/b"] = _dense_init(rng, cfg.hidden, n_feat, 0.5)
    p["latent_scale"] = np.ones(1, np.float32)
    return p


def _mix(p, prefix, x, shape):
    n = np.shape(value_of(x))[0]
    h = ops.silu(ops.dense(ops.reshape(x, (n, -1)), p[f"{prefix}/mix1/w"], p[f"{prefix}/mix1/b"]))
    return ops.reshape(ops.dense(h, p[f"{prefix}/mix2/w"], p[f"{prefix}/mix2/b"]), (n,) + shape)


def conv_ae_encode(cfg: AutoencoderConfig, p, x):
    h = ops.silu(ops.conv2d(x, p["enc/in/w"], p["enc/in/b"], padding=1))
    for i in range(3):
        h = ops.silu(ops.conv2d(h, p[f"enc/down{i}/w"], p[f"enc/down{i}/b"], stride=2, padding=1))
    z = ops.conv2d(h, p["enc/out/w"], p["enc/out/b"])
    if cfg.hidden:
        z = ops.add(z, _mix(p, "enc", h, cfg.latent_shape))
    return ops.mul(z, _scale(p["latent_scale"]))


def conv_ae_decode(cfg: AutoencoderConfig, p, z):
    z = ops.mul(z, _scale(1.0 / value_of(p["latent_scale"])))
    h = ops.conv2d(z, p["dec/in/w"], p["dec/in/b"], padding=1)
    if cfg.hidden:
        h = ops.add(h, _mix(p, "dec", z, np.shape(value_of(h))[1:]))
    h = ops.silu(h)
    for i in range(3):
        h = ops.silu(ops.conv_transpose2d(h, p[f"dec/up{i}/w"], p[f"dec/up{i}/b"], stride=2, padding=1))
    h = ops.conv2d(h, p["dec/out/w"], p["dec/out/b"], padding=1)
    # tanh squashing to [-1, 1], mapped affinely to [0, 1]
    return ops.add(ops.scale(ops.tanh(h), 0.5), np.float32(0.5))


def _scale(s):
    # latent_scale is a frozen constant; it never carries a gradient
    return np.asarray(value_of(s), np.float32).reshape(1, 1, 1, 1)


def identity_ae_init(cfg, rng):
    return {}


def identity_ae_code(cfg, p, x):
    return x


def linear_ae_init(cfg: AutoencoderConfig, rng):
    c, h, w = cfg.latent_shape
    n_lat, n_img = c * h * w, cfg.image_channels * cfg.image_size ** 2
    return {
        "enc/A": (rng.normal(size=(n_img, n_lat)) / np.sqrt(n_img)).astype(np.float32),
        "dec/A": (rng.normal(size=(n_lat, n_img)) / np.sqrt(n_lat)).astype(np.float32),
    }


def linear_ae_encode(cfg, p, x):
    n = value_of(x).shape[0]
    flat = ops.reshape(x, (n, -1))
    zero = np.zeros(value_of(p["enc/A"]).shape[1], np.float32)
    return ops.reshape(ops.dense(flat, p["enc/A"], zero), (n,) + cfg.latent_shape)


def linear_ae_decode(cfg, p, z):
    """x = A vec(z), no squashing: a fixed linear map for loss algebra checks."""
    n = value_of(z).shape[0]
    flat = ops.reshape(z, (n, -1))
    zero = np.zeros(value_of(p["dec/A"]).shape[1], np.float32)
    s = cfg.image_size
    return ops.reshape(ops.dense(flat, p["dec/A"], zero), (n, cfg.image_channels, s, s))


@dataclass(frozen=True)
class AutoencoderKind:
    init: Callable
    encode: Callable
    decode: Callable


AUTOENCODERS: dict[str, AutoencoderKind] = {
    "conv": AutoencoderKind(conv_ae_init, conv_ae_encode, conv_ae_decode),
    "identity": AutoencoderKind(identity_ae_init, identity_ae_code, identity_ae_code),
    "linear": AutoencoderKind(linear_ae_init, linear_ae_encode, linear_ae_decode),
}


# --------------------------------------------------------------------------
# denoisers


def timestep_embedding(t, dim: int) -> np.ndarray:
    """Sinusoidal embedding of integer timesteps, [N, dim] float32."""
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    args = t[:, None] * freqs[None]
    emb = np.concatenate([np.sin(args), np.cos(args)], axis=1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((len(t), 1))], axis=1)
    return emb.astype(np.float32)


def _cond_init(rng, cfg: DenoiserConfig, width: int, p: dict):
    d = cfg.time_embed_dim
    p["temb/1/w"], p["temb/1/b"] = _dense_init(rng, d, width)
    p["temb/2/w"], p["temb/2/b"] = _dense_init(rng, width, width)
    p["class_embed"] = rng.normal(scale=1.0, size=(cfg.num_classes + 1, width)).astype(np.float32)


def _cond(cfg: DenoiserConfig, p, t, labels):
    """Timestep MLP output plus class embedding, [N, width]."""
    e = timestep_embedding(t, cfg.time_embed_dim)
    h = ops.dense(e, p["temb/1/w"], p["temb/1/b"])
    h = ops.dense(ops.silu(h), p["temb/2/w"], p["temb/2/b"])
    return ops.add(h, ops.embedding(p["class_embed"], labels))


def dit_init(cfg: DenoiserConfig, rng) -> dict:
    W, pc = cfg.width, cfg.latent_channels * cfg.patch ** 2
    L = (cfg.latent_size // cfg.patch) ** 2
    if W % cfg.heads:
        raise ModelError(f"width {W} not divisible by heads {cfg.heads}")
    p = {}
    p["embed/w"], p["embed/b"] = _dense_init(rng, pc, W)
    p["pos"] = rng.normal(scale=0.02, size=(1, L, W)).astype(np.float32)
    _cond_init(rng, cfg, W, p)
    ones, zeros = np.ones(W, np.float32), np.zeros(W, np.float32)
    for i in range(cfg.depth):
        b = f"block{i}/"
        p[b + "cond/w"], p[b + "cond/b"] = _dense_init(rng, W, W)
        p[b + "ln1/g"], p[b + "ln1/b"] = ones.copy(), zeros.copy()
        p[b + "qkv/w"], p[b + "qkv/b"] = _dense_init(rng, W, 3 * W)
        p[b + "proj/w"], p[b + "proj/b"] = _dense_init(rng, W, W, gain=0.5)
        p[b + "ln2/g"], p[b + "ln2/b"] = ones.copy(), zeros.copy()
        p[b + "mlp1/w"], p[b + "mlp1/b"] = _dense_init(rng, W, 4 * W)
        p[b + "mlp2/w"], p[b + "mlp2/b"] = _dense_init(rng, 4 * W, W, gain=0.5)
    p["final_ln/g"], p["final_ln/b"] = ones.copy(), zeros.copy()
    p["out/w"], p["out/b"] = _dense_init(rng, W, pc, gain=0.1)
    return p


def dit_apply(cfg: DenoiserConfig, p, z, t, labels):
    n = value_of(z).shape[0]
    W = cfg.width
    tokens = ops.patchify(z, cfg.patch)
    h = ops.add(ops.dense(tokens, p["embed/w"], p["embed/b"]), p["pos"])
    c = ops.silu(_cond(cfg, p, t, labels))
    for i in range(cfg.depth):
        b = f"block{i}/"
        shift = ops.reshape(ops.dense(c, p[b + "cond/w"], p[b + "cond/b"]), (n, 1, W))
        h = ops.add(h, shift)
        a = ops.layer_norm(h, p[b + "ln1/g"], p[b + "ln1/b"])
        a = ops.attention(ops.dense(a, p[b + "qkv/w"], p[b + "qkv/b"]), cfg.heads)
        h = ops.add(h, ops.dense(a, p[b + "proj/w"], p[b + "proj/b"]))
        m = ops.layer_norm(h, p[b + "ln2/g"], p[b + "ln2/b"])
        m = ops.gelu(ops.dense(m, p[b + "mlp1/w"], p[b + "mlp1/b"]))
        h = ops.add(h, ops.dense(m, p[b + "mlp2/w"], p[b + "mlp2/b"]))
    h = ops.layer_norm(h, p["final_ln/g"], p["final_ln/b"])
    out = ops.dense(h, p["out/w"], p["out/b"])
    s = cfg.latent_size
    return ops.unpatchify(out, cfg.patch, cfg.latent_channels, s, s)


def _res_init(rng, p, name, c_in, c_out, temb_dim):
    p[name + "gn1/g"], p[name + "gn1/b"] = np.ones(c_in, np.float32), np.zeros(c_in, np.float32)
    p[name + "conv1/w"], p[name + "conv1/b"] = _conv_init(rng, c_out, c_in, 3, np.sqrt(2.0))
    p[name + "temb/w"], p[name + "temb/b"] = _dense_init(rng, temb_dim, c_out)
    p[name + "gn2/g"], p[name + "gn2/b"] = np.ones(c_out, np.float32), np.zeros(c_out, np.float32)
    p[name + "conv2/w"], p[name + "conv2/b"] = _conv_init(rng, c_out, c_out, 3, 0.5)
    if c_in != c_out:
        p[name + "skip/w"], p[name + "skip/b"] = _conv_init(rng, c_out, c_in, 1)


def _res_apply(cfg, p, name, x, c):
    n = value_of(x).shape[0]
    h = ops.silu(ops.group_norm(x, p[name + "gn1/g"], p[name + "gn1/b"], cfg.groups))
    h = ops.conv2d(h, p[name + "conv1/w"], p[name + "conv1/b"], padding=1)
    c_out = value_of(p[name + "conv1/b"]).shape[0]
    tb = ops.reshape(ops.dense(c, p[name + "temb/w"], p[name + "temb/b"]), (n, c_out, 1, 1))
    h = ops.add(h, tb)
    h = ops.silu(ops.group_norm(h, p[name + "gn2/g"], p[name + "gn2/b"], cfg.groups))
    h = ops.conv2d(h, p[name + "conv2/w"], p[name + "conv2/b"], padding=1)
    if name + "skip/w" in p:
        x = ops.conv2d(x, p[name + "skip/w"], p[name + "skip/b"])
    return ops.add(x, h)


def unet_init(cfg: DenoiserConfig, rng) -> dict:
    b, E = cfg.base_width, cfg.base_width * 2
    if cfg.latent_size % 2:
        raise ModelError("unet needs an even latent size")
    p = {}
    _cond_init(rng, cfg, E, p)
    p["in/w"], p["in/b"] = _conv_init(rng, b, cfg.latent_channels, 3)
    _res_init(rng, p, "res0/", b, b, E)
    p["down/w"], p["down/b"] = _conv_init(rng, 2 * b, b, 3, np.sqrt(2.0))
    _res_init(rng, p, "res1/", 2 * b, 2 * b, E)
    _res_init(rng, p, "mid/", 2 * b, 2 * b, E)
    p["up/w"], p["up/b"] = _convt_init(rng, 2 * b, b, 4, 2, np.sqrt(2.0))
    _res_init(rng, p, "res2/", 2 * b, b, E)
    p["out_gn/g"], p["out_gn/b"] = np.ones(b, np.float32), np.zeros(b, np.float32)
    p["out/w"], p["out/b"] = _conv_init(rng, cfg.latent_channels, b, 3, 0.1)
    return p


def unet_apply(cfg: DenoiserConfig, p, z, t, labels):
    c = ops.silu(_cond(cfg, p, t, labels))
    h0 = ops.conv2d(z, p["in/w"], p["in/b"], padding=1)
    h0 = _res_apply(cfg, p, "res0/", h0, c)
    h1 = ops.conv2d(h0, p["down/w"], p["down/b"], stride=2, padding=1)
    h1 = _res_apply(cfg, p, "res1/", h1, c)
    h1 = _res_apply(cfg, p, "mid/", h1, c)
    u = ops.conv_transpose2d(h1, p["up/w"], p["up/b"], stride=2, padding=1)
    h = _res_apply(cfg, p, "res2/", ops.concat([u, h0], axis=1), c)
    h = ops.silu(ops.group_norm(h, p["out_gn/g"], p["out_gn/b"], cfg.groups))
    return ops.conv2d(h, p["out/w"], p["out/b"], padding=1)


@dataclass(frozen=True)
class Backbone:
    init: Callable
    apply: Callable


BACKBONES: dict[str, Backbone] = {
    "dit": Backbone(dit_init, dit_apply),
    "unet": Backbone(unet_init, unet_apply),
}


def register_backbone(name: str, init: Callable, apply: Callable) -> None:
    """Add a denoiser variant; ``apply(cfg, params, z_t, t, labels)`` returns eps-hat."""
    BACKBONES[name] = Backbone(init, apply)


def register_autoencoder(name: str, init: Callable, encode: Callable, decode: Callable) -> None:
    AUTOENCODERS[name] = AutoencoderKind(init, encode, decode)


# --------------------------------------------------------------------------
# bundle


@dataclass
class ModelBundle:
    ae_config: AutoencoderConfig
    den_config: DenoiserConfig
    schedule: NoiseSchedule
    autoencoder: dict
    denoiser: dict
    frozen: dict = field(default_factory=lambda: {"autoencoder": True, "denoiser": False})

    def encode(self, x, params=None):
        cfg = self.ae_config
        s = cfg.image_size
        shape = np.shape(value_of(x))
        if len(shape) != 4 or shape[1:] != (cfg.image_channels, s, s):
            raise ModelError(f"encode: expected [N, {cfg.image_channels}, {s}, {s}], got {shape}")
        return AUTOENCODERS[cfg.variant].encode(cfg, params or self.autoencoder, x)

    def decode(self, z, params=None):
        cfg = self.ae_config
        shape = np.shape(value_of(z))
        if len(shape) != 4 or shape[1:] != cfg.latent_shape:
            raise ModelError(f"decode: expected [N, {', '.join(map(str, cfg.latent_shape))}], got {shape}")
        return AUTOENCODERS[cfg.variant].decode(cfg, params or self.autoencoder, z)

    def predict_noise(self, z_t, t, cond, params=None):
        """eps_theta(z_t, t, cond); ``params`` overrides the denoiser weights (e.g. traced nodes)."""
        cfg = self.den_config
        shape = np.shape(value_of(z_t))
        n = shape[0]
        expect = (cfg.latent_channels, cfg.latent_size, cfg.latent_size)
        if shape[1:] != expect:
            raise ModelError(f"predict_noise: latent shape {shape[1:]} != {expect}")
        t = np.broadcast_to(self.schedule.check_t(t), (n,))
        labels = np.broadcast_to(np.asarray(cond, dtype=np.int64), (n,))
        if labels.min() < 0 or labels.max() > cfg.num_classes:
            raise ModelError(f"label out of range [0, {cfg.num_classes}]")
        p = self.denoiser if params is None else params
        return BACKBONES[cfg.variant].apply(cfg, p, z_t, t, labels)

    def with_denoiser(self, params) -> "ModelBundle":
        """Shallow view sharing everything except the denoiser weights."""
        return replace(self, denoiser=params)

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {f"ae/{k}": v for k, v in self.autoencoder.items()}
        out.update({f"den/{k}": v for k, v in self.denoiser.items()})
        return out

    def configs(self) -> dict:
        return {"autoencoder": self.ae_config.to_dict(), "denoiser": self.den_config.to_dict(),
                "schedule": self.schedule.to_dict(), "frozen": dict(self.frozen)}

    @classmethod
    def from_state(cls, configs: dict, tensors: dict[str, np.ndarray]) -> "ModelBundle":
        ae = {k[3:]: v for k, v in tensors.items() if k.startswith("ae/")}
        den = {k[4:]: v for k, v in tensors.items() if k.startswith("den/")}
        return cls(AutoencoderConfig(**configs["autoencoder"]), DenoiserConfig(**configs["denoiser"]),
                   NoiseSchedule.from_dict(configs["schedule"]), ae, den, dict(configs["frozen"]))


def init_autoencoder(cfg: AutoencoderConfig, seed: int) -> dict:
    if cfg.variant not in AUTOENCODERS:
        raise ModelError(f"unknown autoencoder variant {cfg.variant!r}")
    cfg.latent_shape  # validates divisibility
    return AUTOENCODERS[cfg.variant].init(cfg, np.random.default_rng([seed, 1]))


def init_denoiser(cfg: DenoiserConfig, seed: int) -> dict:
    if cfg.variant not in BACKBONES:
        raise ModelError(f"unknown denoiser variant {cfg.variant!r}; known: {sorted(BACKBONES)}")
    return BACKBONES[cfg.variant].init(cfg, np.random.default_rng([seed, 2]))


def build_bundle(ae_config: AutoencoderConfig | None = None, den_config: DenoiserConfig | None = None,
                 schedule: NoiseSchedule | None = None, seed: int = 0) -> ModelBundle:
    ae_config = ae_config or AutoencoderConfig()
    if den_config is None:
        c, h, _ = ae_config.latent_shape
        den_config = DenoiserConfig(latent_channels=c, latent_size=h)
    return ModelBundle(ae_config, den_config, schedule or linear_schedule(),
                       init_autoencoder(ae_config, seed), init_denoiser(den_config, seed))


def _freeze(params: dict) -> dict:
    out = {}
    for k, v in params.items():
        a = np.array(v, copy=True)
        a.setflags(write=False)
        out[k] = a
    return out


def clone_frozen(bundle: ModelBundle) -> ModelBundle:
    """Deep copy with every parameter read-only and flagged frozen."""
    return ModelBundle(bundle.ae_config, bundle.den_config, bundle.schedule,
                       _freeze(bundle.autoencoder), _freeze(bundle.denoiser),
                       {"autoencoder": True, "denoiser": True})


def copy_bundle(bundle: ModelBundle) -> ModelBundle:
    """Independent, writable deep copy."""
    return ModelBundle(bundle.ae_config, bundle.den_config, bundle.schedule,
                       {k: np.array(v) for k, v in bundle.autoencoder.items()},
                       {k: np.array(v) for k, v in bundle.denoiser.items()},
                       copy.deepcopy(bundle.frozen))


def param_checksum(params: dict) -> str:
    h = hashlib.sha256()
    for k in sorted(params):
        h.update(k.encode())
        h.update(np.ascontiguousarray(params[k]).tobytes())
    return h.hexdigest()
