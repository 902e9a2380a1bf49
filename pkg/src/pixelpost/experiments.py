"""Experiment plans: the shared foundation (corpus, autoencoder, base model)
and the post-training ablations built on it.

A plan is an ordered list of nodes. Each node runs in its own directory and
finishes by writing ``manifest.json`` with its resolved config, the digests
of the manifests it depends on, the build id, and a sha256 per output file.
Rerunning a plan skips every node whose config and dependencies are
unchanged and whose outputs still verify by checksum.
"""

from __future__ import annotations

import csv
import hashlib
import json
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import __version__
from .diffkit.core import value_of
from .data import CorpusSpec, generate_corpus, load_corpus, save_corpus
from .metrics import (
    decode_error_curve,
    read_report,
    sample_report,
    template_bank,
    write_report,
    x0_variance_curve,
)
from .models import AutoencoderConfig, DenoiserConfig, build_bundle, copy_bundle
from .sampler import SamplerConfig, sample_classes
from .spectrum import mean_hf_ratio
from .trainer import (
    MetricsLog,
    PhaseData,
    RunConfig,
    encode_dataset,
    load_bundle,
    read_metrics,
    restore_state,
    save_bundle,
    save_checkpoint,
    start_state,
    train_steps,
)

PRESET_SEEDS = (7, 13, 29, 42)
SFT_VARIANTS = ("latent", "pixel", "combined")
PREF_MODES = ("dpo+dpoPix", "dpo+simpoPix", "simpo+simpoPix", "dpoOnly")
T_GRID = tuple(range(100, 1000, 100))


class PlanError(ValueError):
    pass


def build_id() -> str:
    """Version plus a digest of the package sources."""
    h = hashlib.sha256()
    for p in sorted(Path(__file__).parent.rglob("*.py")):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return f"{__version__}+{h.hexdigest()[:12]}"


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# --------------------------------------------------------------------------
# settings


@dataclass(frozen=True)
class PlanSettings:
    """Every knob of the foundation and the ablation runs."""

    # corpus
    corpus_seed: int = 0
    n_train: int = 2048
    n_sft: int = 256
    n_eval: int = 256
    n_pairs: int = 128
    # autoencoder
    ae_width: int = 16
    ae_hidden: int = 512
    ae_epochs: int = 80
    ae_lr: float = 2e-3
    ae_batch: int = 32
    # base diffusion model
    backbone: str = "dit"
    den_width: int = 128
    den_depth: int = 4
    diff_epochs: int = 300
    diff_lr: float = 1e-3
    diff_batch: int = 32
    # post-training
    sft_epochs: int = 20
    sft_lr: float = 3e-5
    sft_batch: int = 16
    pref_epochs: int = 20
    pref_lr: float = 1e-6
    pref_batch: int = 16
    lam: float = 8.0
    mu: float = 8.0
    beta: float = 5000.0
    share_noise: bool = False
    cond_dropout: float = 0.1
    # evaluation
    sample_steps: int = 50
    guidance: float = 3.0
    n_per_class: int = 128
    curve_draws: int = 100
    curve_latents: int = 64

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PlanSettings":
        known = {f.name: f.type for f in fields(cls)}
        unknown = set(d) - set(known)
        if unknown:
            raise PlanError(f"unknown plan settings {sorted(unknown)}")
        return cls(**d)

    def override(self, values: dict) -> "PlanSettings":
        """Apply string or typed overrides, coercing to each field's type."""
        out = {}
        for f in fields(self):
            if f.name in values:
                out[f.name] = _coerce(type(getattr(self, f.name)), values[f.name], f.name)
        unknown = set(values) - {f.name for f in fields(self)}
        if unknown:
            raise PlanError(f"unknown plan settings {sorted(unknown)}")
        return replace(self, **out)


def _coerce(tp, value, name):
    if isinstance(value, tp) and not (tp is int and isinstance(value, bool)):
        return value
    try:
        if tp is bool:
            if str(value).lower() in ("1", "true", "yes", "on"):
                return True
            if str(value).lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        return tp(value)
    except (TypeError, ValueError):
        raise PlanError(f"setting {name} expects {tp.__name__}, got {value!r}") from None


SMOKE = PlanSettings(n_train=32, n_sft=16, n_eval=16, n_pairs=8, ae_width=4, ae_hidden=16, ae_epochs=1,
                     ae_batch=16, den_width=16, den_depth=1, diff_epochs=1, diff_batch=16, sft_epochs=1,
                     pref_epochs=1, pref_batch=8, sample_steps=4, n_per_class=2, curve_draws=2,
                     curve_latents=4)
SETTINGS = {"full": PlanSettings(), "smoke": SMOKE}


# --------------------------------------------------------------------------
# nodes and plans


@dataclass(frozen=True)
class Node:
    name: str
    kind: str
    config: dict
    deps: dict = field(default_factory=dict)  # role -> node name

    def to_dict(self):
        return {"name": self.name, "kind": self.kind, "config": self.config, "deps": dict(self.deps)}


@dataclass
class ExperimentPlan:
    name: str
    nodes: list[Node]

    def validate(self) -> "ExperimentPlan":
        seen = set()
        for n in self.nodes:
            if n.kind not in NODE_KINDS:
                raise PlanError(f"node {n.name}: unknown kind {n.kind!r}")
            if n.name in seen:
                raise PlanError(f"duplicate node {n.name}")
            for role, dep in n.deps.items():
                if dep not in seen:
                    # nodes are topologically ordered, so this also rules out cycles
                    raise PlanError(f"node {n.name} depends on {dep}, which is not produced earlier in the plan")
            seen.add(n.name)
        return self

    def node(self, name) -> Node:
        for n in self.nodes:
            if n.name == name:
                return n
        raise PlanError(f"no node {name!r} in plan {self.name}")

    def merge(self, other: "ExperimentPlan", name: str | None = None) -> "ExperimentPlan":
        nodes = list(self.nodes)
        have = {n.name: n for n in nodes}
        for n in other.nodes:
            if n.name in have:
                if have[n.name] != n:
                    raise PlanError(f"conflicting definitions of node {n.name}")
                continue
            nodes.append(n)
            have[n.name] = n
        return ExperimentPlan(name or f"{self.name}+{other.name}", nodes).validate()


def _run(phase, s: PlanSettings, seed, **kw) -> dict:
    return RunConfig(phase=phase, seed=seed, cond_dropout=s.cond_dropout, **kw).to_dict()


def foundation_plan(s: PlanSettings) -> ExperimentPlan:
    corpus = CorpusSpec(n_train=s.n_train, n_sft=s.n_sft, n_eval=s.n_eval, n_pairs=s.n_pairs, seed=s.corpus_seed)
    ae = AutoencoderConfig(base_width=s.ae_width, hidden=s.ae_hidden)
    c, h, _ = ae.latent_shape
    den = DenoiserConfig(variant=s.backbone, latent_channels=c, latent_size=h, width=s.den_width, depth=s.den_depth)
    nodes = [
        Node("data", "gen-data", {"corpus": corpus.to_dict()}),
        Node("ae", "pretrain-ae", {"autoencoder": ae.to_dict(),
                                   "run": _run("pretrain_ae", s, 0, epochs=s.ae_epochs, lr=s.ae_lr,
                                               batch_size=s.ae_batch, weight_decay=0.0, lr_schedule="cosine")},
             {"data": "data"}),
        Node("base", "pretrain-diffusion", {"denoiser": den.to_dict(),
                                            "run": _run("pretrain_diffusion", s, 0, epochs=s.diff_epochs,
                                                        lr=s.diff_lr, batch_size=s.diff_batch,
                                                        lr_schedule="cosine")},
             {"data": "data", "ae": "ae"}),
    ]
    return ExperimentPlan("foundation", nodes).validate()


def _eval_cfg(s: PlanSettings, seed: int) -> dict:
    return {"sampler": SamplerConfig(s.sample_steps, s.guidance).to_dict(), "n_per_class": s.n_per_class,
            "seed": seed}


def _base_eval(s: PlanSettings, seed: int) -> list[Node]:
    return [Node(f"eval-base-s{seed}", "eval", _eval_cfg(s, seed), {"model": "base", "data": "data"})]


def table5_plan(s: PlanSettings, seed: int) -> ExperimentPlan:
    """Latent-only, pixel-only and combined SFT from the same base model and seed."""
    f = foundation_plan(s)
    nodes = _base_eval(s, seed)
    for v in SFT_VARIANTS:
        name = f"sft-{v}-s{seed}"
        nodes.append(Node(name, "sft", {"run": _run("sft", s, seed, objective=v, lam=s.lam, epochs=s.sft_epochs,
                                                    lr=s.sft_lr, batch_size=s.sft_batch)},
                          {"base": "base", "data": "data"}))
        nodes.append(Node(f"eval-{name}", "eval", _eval_cfg(s, seed), {"model": name, "data": "data"}))
    return f.merge(ExperimentPlan("table5", nodes), f"table5-s{seed}")


def table6_plan(s: PlanSettings, seed: int) -> ExperimentPlan:
    """The four reward-modelling modes from the same base model and seed."""
    f = foundation_plan(s)
    nodes = _base_eval(s, seed)
    for m in PREF_MODES:
        name = f"prefs-{mode_slug(m)}-s{seed}"
        nodes.append(Node(name, "prefs", {"run": _run("preference", s, seed, objective=m, mu=s.mu, beta=s.beta,
                                                      share_noise=s.share_noise,
                                                      epochs=s.pref_epochs, lr=s.pref_lr,
                                                      batch_size=s.pref_batch)},
                          {"base": "base", "data": "data"}))
        nodes.append(Node(f"eval-{name}", "eval", _eval_cfg(s, seed), {"model": name, "data": "data"}))
    return f.merge(ExperimentPlan("table6", nodes), f"table6-s{seed}")


def decode_ablation_plan(s: PlanSettings, seed: int) -> ExperimentPlan:
    """Error of the x0 path and of the decode-at-t path across timesteps."""
    f = foundation_plan(s)
    node = Node(f"curves-s{seed}", "curves", {"t_grid": list(T_GRID), "n_draws": s.curve_draws,
                                              "n_latents": s.curve_latents, "seed": seed},
                {"model": "base", "data": "data"})
    return f.merge(ExperimentPlan("decode-ablation", [node]), f"decode-ablation-s{seed}")


PRESETS = {"table5": table5_plan, "table6": table6_plan, "decode-ablation": decode_ablation_plan}


def mode_slug(mode: str) -> str:
    return mode.replace("+", "-")


def preset_plan(preset: str, settings: PlanSettings, seeds=PRESET_SEEDS) -> ExperimentPlan:
    if preset not in PRESETS:
        raise PlanError(f"unknown preset {preset!r}; expected one of {sorted(PRESETS)}")
    plan = None
    for seed in seeds:
        p = PRESETS[preset](settings, int(seed))
        plan = p if plan is None else plan.merge(p, preset)
    plan.name = preset
    return plan


# --------------------------------------------------------------------------
# manifests


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()


def read_manifest(run_dir) -> dict | None:
    p = Path(run_dir) / "manifest.json"
    if not p.exists():
        return None
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError:
        return None


def _header(kind: str, config: dict, inputs: dict, build: str) -> dict:
    deps = {}
    for role, path in sorted(inputs.items()):
        m = read_manifest(path)
        # keyed on the dependency's outputs, so a deterministic rerun keeps dependants valid
        deps[role] = {"run": Path(path).name, "digest": _digest(m.get("outputs")) if m else None}
    # round-trip through JSON so tuples compare equal to the lists read back from disk
    config = json.loads(json.dumps(config))
    return {"kind": kind, "config": config, "deps": deps, "build_id": build}


def run_complete(out, kind: str, config: dict, inputs: dict, build: str | None = None) -> bool:
    """True when ``out`` holds a finished run of exactly this config and these
    inputs, and every recorded output still has its recorded checksum."""
    m = read_manifest(out)
    if m is None or m.get("status") != "complete":
        return False
    want = _header(kind, config, inputs, build or build_id())
    # the build id is recorded for provenance; completion is decided by config,
    # dependency outputs and checksums
    if any(m.get(k) != v for k, v in want.items() if k != "build_id"):
        return False
    for rel, digest in m.get("outputs", {}).items():
        p = Path(out) / rel
        if not p.exists() or file_sha256(p) != digest:
            return False
    return True


def write_manifest(out, kind, config, inputs, outputs: list[str], wall_clock: float, build: str,
                   extra=None) -> Path:
    out = Path(out)
    m = _header(kind, config, inputs, build)
    m.update(status="complete", wall_clock=round(wall_clock, 3),
             outputs={rel: file_sha256(out / rel) for rel in sorted(outputs)}, **(extra or {}))
    p = out / "manifest.json"
    tmp = p.with_suffix(".tmp")
    tmp.write_text(json.dumps(m, indent=1, sort_keys=True))
    tmp.replace(p)
    return p


# --------------------------------------------------------------------------
# node execution


def _train(config: RunConfig, bundle, data: PhaseData, out: Path, on_epoch=None):
    """Train with a resumable checkpoint at out/state.ldpx."""
    ckpt, metrics_path = out / "state.ldpx", out / "metrics.csv"
    config = replace(config, out_dir=str(out), checkpoint_every=config.checkpoint_every or 1)
    if ckpt.exists():
        state = restore_state(ckpt)
        if state.config.to_dict() != config.to_dict():
            raise PlanError(f"{ckpt} belongs to a different run config; remove it to restart")
        metrics = MetricsLog(metrics_path, keep_rows=state.metrics_rows)
    else:
        state = start_state(config, bundle)
        metrics = MetricsLog(metrics_path)
    state = train_steps(state, data, metrics, ckpt, on_epoch=on_epoch)
    save_checkpoint(state, ckpt)
    return state.bundle


def _corpus(inputs):
    return load_corpus(inputs["data"] / "corpus")


def run_gen_data(config, inputs, out: Path) -> list[str]:
    corpus = generate_corpus(CorpusSpec.from_dict(config["corpus"]))
    root = save_corpus(corpus, out / "corpus")
    return ["corpus/manifest.json"] + [f"corpus/images/{p.name}" for p in sorted((root / "images").iterdir())]


def run_pretrain_ae(config, inputs, out: Path) -> list[str]:
    corpus = _corpus(inputs)
    bundle = build_bundle(AutoencoderConfig(**config["autoencoder"]))
    run = RunConfig.from_dict(config["run"])
    bundle = _train(run, bundle, PhaseData(images=corpus.images("train")), out)
    recon = _recon_mse(bundle, corpus.images("eval"))
    save_bundle(bundle, out / "model.ldpx", {"eval_recon_mse": recon})
    (out / "recon.json").write_text(json.dumps({"eval_recon_mse": recon}))
    return ["model.ldpx", "metrics.csv", "recon.json"]


def _recon_mse(bundle, images) -> float:
    err = [np.mean((value_of(bundle.decode(bundle.encode(images[i:i + 64]))) - images[i:i + 64]) ** 2)
           * len(images[i:i + 64]) for i in range(0, len(images), 64)]
    return float(np.sum(err) / len(images))


def run_pretrain_diffusion(config, inputs, out: Path) -> list[str]:
    corpus = _corpus(inputs)
    ae = load_bundle(inputs["ae"] / "model.ldpx")
    den_cfg = DenoiserConfig(**config["denoiser"])
    bundle = build_bundle(ae.ae_config, den_cfg, ae.schedule, seed=RunConfig.from_dict(config["run"]).seed)
    bundle.autoencoder = ae.autoencoder
    latents = encode_dataset(bundle, corpus.images("train"))
    data = PhaseData(latents=latents, labels=corpus.labels("train"))
    bundle = _train(RunConfig.from_dict(config["run"]), bundle, data, out)
    save_bundle(bundle, out / "model.ldpx")
    return ["model.ldpx", "metrics.csv"]


def posttrain_data(bundle, corpus, phase: str) -> PhaseData:
    if phase == "sft":
        return PhaseData(latents=encode_dataset(bundle, corpus.images("sft")), labels=corpus.labels("sft"))
    w, l, labels = corpus.pair_arrays()
    return PhaseData(winners=encode_dataset(bundle, w), losers=encode_dataset(bundle, l), labels=labels)


def run_posttrain(config, inputs, out: Path) -> list[str]:
    corpus = _corpus(inputs)
    base = load_bundle(inputs["base"] / "model.ldpx")
    run = RunConfig.from_dict(config["run"])
    bundle = _train(run, copy_bundle(base), posttrain_data(base, corpus, run.phase), out)
    save_bundle(bundle, out / "model.ldpx")
    return ["model.ldpx", "metrics.csv"]


def tier_targets(corpus) -> dict:
    w, _, _ = corpus.pair_arrays()
    return {"target_hf_sft": mean_hf_ratio(corpus.images("sft")), "target_hf_winner": mean_hf_ratio(w),
            "target_hf_train": mean_hf_ratio(corpus.images("train"))}


def run_eval(config, inputs, out: Path) -> list[str]:
    corpus = _corpus(inputs)
    bundle = load_bundle(inputs["model"] / "model.ldpx")
    cfg = SamplerConfig(**config["sampler"])
    images, labels = sample_classes(bundle, cfg, config["n_per_class"], config["seed"])
    bank = template_bank(images.shape[-1], tuple(corpus.spec.classes))
    rep = sample_report(images, labels, bundle.den_config.num_classes, bank)
    rep.update(tier_targets(corpus))
    write_report(out / "report.csv", inputs["model"].name, _final_step(inputs["model"]), rep)
    np.save(out / "samples.npy", images[: 4 * bundle.den_config.num_classes].astype(np.float32))
    return ["report.csv", "samples.npy"]


def _final_step(run_dir: Path) -> int:
    m = read_manifest(run_dir) or {}
    return int(m.get("final_step", 0))


def run_curves(config, inputs, out: Path) -> list[str]:
    corpus = _corpus(inputs)
    bundle = load_bundle(inputs["model"] / "model.ldpx")
    images = corpus.images("eval")[: config["n_latents"]]
    labels = corpus.labels("eval")[: config["n_latents"]]
    z0 = encode_dataset(bundle, images)
    kw = dict(labels=labels, n_draws=config["n_draws"], seed=config["seed"])
    rows = x0_variance_curve(bundle, z0, config["t_grid"], **kw) + decode_error_curve(bundle, z0, config["t_grid"], **kw)
    with open(out / "curves.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["t", "path", "mean", "variance", "n"])
        for r in rows:
            w.writerow([r.t, r.path, repr(r.mean), repr(r.variance), r.n])
    return ["curves.csv"]


NODE_KINDS = {
    "gen-data": run_gen_data,
    "pretrain-ae": run_pretrain_ae,
    "pretrain-diffusion": run_pretrain_diffusion,
    "sft": run_posttrain,
    "prefs": run_posttrain,
    "eval": run_eval,
    "curves": run_curves,
}


TRAINING_KINDS = ("pretrain-ae", "pretrain-diffusion", "sft", "prefs")


def execute(kind: str, config: dict, inputs: dict, out, build: str | None = None) -> dict:
    """Run one job into ``out`` (resuming a partial run) and write its manifest.

    ``inputs`` maps roles (data, ae, base, model) to finished run directories.
    """
    if kind not in NODE_KINDS:
        raise PlanError(f"unknown job kind {kind!r}")
    build = build or build_id()
    out = Path(out)
    inputs = {role: Path(p) for role, p in inputs.items()}
    for role, path in inputs.items():
        m = read_manifest(path)
        if m is None or m.get("status") != "complete":
            raise PlanError(f"missing dependency: {role} run {path} has no complete manifest")
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    outputs = NODE_KINDS[kind](config, inputs, out)
    extra = {"final_step": _last_step(out / "metrics.csv")} if kind in TRAINING_KINDS else {}
    write_manifest(out, kind, config, inputs, outputs, time.perf_counter() - t0, build, extra)
    return read_manifest(out)


def _last_step(path: Path) -> int:
    rows = read_metrics(path) if path.exists() else []
    return int(rows[-1]["step"]) if rows else 0


def _node_io(root: Path, node: Node):
    return root / node.name, {role: root / dep for role, dep in node.deps.items()}


def node_complete(root, node: Node, build: str | None = None) -> bool:
    out, inputs = _node_io(Path(root), node)
    return run_complete(out, node.kind, node.config, inputs, build)


def run_plan(plan: ExperimentPlan, root, log=print) -> dict[str, dict]:
    """Run every node that does not verify, in order; returns manifests by node name."""
    plan.validate()
    build = build_id()
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    (root / f"plan-{plan.name}.json").write_text(
        json.dumps({"plan": plan.name, "build_id": build, "nodes": [n.to_dict() for n in plan.nodes]},
                   indent=1, sort_keys=True))
    done = {}
    for node in plan.nodes:
        out, inputs = _node_io(root, node)
        if run_complete(out, node.kind, node.config, inputs, build):
            log(f"skip {node.name} (verified)")
        else:
            log(f"run  {node.name} ({node.kind})")
            execute(node.kind, node.config, inputs, out, build)
        done[node.name] = read_manifest(out)
    return done


# --------------------------------------------------------------------------
# comparison tables


def read_node_report(root, name) -> dict:
    rows = read_report(Path(root) / name / "report.csv")
    return {r["metric"]: float(r["value"]) if r["value"] not in ("True", "False") else r["value"] == "True"
            for r in rows}


def comparison_rows(root, preset: str, seed: int) -> list[dict]:
    """One row per variant of a preset at one seed, with the baseline first."""
    if preset == "table5":
        variants = [(v, f"sft-{v}-s{seed}") for v in SFT_VARIANTS]
        target = "target_hf_sft"
    elif preset == "table6":
        variants = [(m, f"prefs-{mode_slug(m)}-s{seed}") for m in PREF_MODES]
        target = "target_hf_winner"
    else:
        raise PlanError(f"no comparison table for preset {preset!r}")
    base = read_node_report(root, f"eval-base-s{seed}")
    rows = [{"preset": preset, "seed": seed, "variant": "baseline", **_row(base, target, base)}]
    for v, node in variants:
        rows.append({"preset": preset, "seed": seed, "variant": v,
                     **_row(read_node_report(root, f"eval-{node}"), target, base)})
    return rows


def _row(rep, target, base):
    return {"hf_energy_ratio": rep["hf_energy_ratio"], "target_hf": rep[target],
            "hf_gap": abs(rep["hf_energy_ratio"] - rep[target]), "flaw_mse": rep["flaw_mse"],
            "accuracy": rep["accuracy"], "accuracy_drop": base["accuracy"] - rep["accuracy"]}


COMPARISON_FIELDS = ("preset", "seed", "variant", "hf_energy_ratio", "target_hf", "hf_gap", "flaw_mse",
                     "accuracy", "accuracy_drop")


def write_comparison(path, rows: list[dict]) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=COMPARISON_FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return path
