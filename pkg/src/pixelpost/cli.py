"""Command-line entry point: ``pixelpost <command> [options]``.

Option values resolve as flag > ``PIXELPOST_<KEY>`` environment variable >
``--config`` file (flat ``key = value`` lines) > built-in default. Failures
print one line, ``pixelpost: error: <kind>: <message>``, and exit nonzero.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
from pathlib import Path

from .data import CorpusError
from .experiments import (
    PRESET_SEEDS,
    PRESETS,
    SETTINGS,
    ExperimentPlan,
    PlanError,
    PlanSettings,
    comparison_rows,
    execute,
    preset_plan,
    read_manifest,
    run_complete,
    run_plan,
    write_comparison,
)
from .losses import LossError
from .models import ModelError
from .sampler import SamplerConfig, SamplerError, sample_classes, write_samples
from .schedule import ScheduleError
from .trainer import CheckpointError, RunConfig, TrainingError, load_bundle

DEFAULTS = PlanSettings()


class CliError(Exception):
    def __init__(self, kind: str, message: str, code: int = 2):
        super().__init__(message)
        self.kind, self.code = kind, code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("usage", message)


# --------------------------------------------------------------------------
# option resolution


def read_config(path) -> dict:
    """Flat ``key = value`` file; blank lines and ``#`` comments are ignored."""
    p = Path(path)
    if not p.exists():
        raise CliError("config", f"config file not found: {p}")
    out = {}
    for n, raw in enumerate(p.read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError("config", f"{p}:{n}: expected key = value, got {raw.strip()!r}")
        k, v = (x.strip() for x in line.split("=", 1))
        if not k:
            raise CliError("config", f"{p}:{n}: empty key")
        out[k.replace("-", "_")] = v
    return out


def _resolve(args, options: dict, env=None, extra_keys=()) -> dict:
    """Merge flags, environment and config file over the option defaults."""
    env = os.environ if env is None else env
    cfg = read_config(args.config) if getattr(args, "config", None) else {}
    unknown = set(cfg) - set(options) - set(extra_keys)
    if unknown:
        raise CliError("config", f"unknown config keys {sorted(unknown)} for {args.command}")
    out = {}
    for key, (tp, default) in options.items():
        flag = getattr(args, key, None)
        if flag is not None:
            value = flag
        elif f"PIXELPOST_{key.upper()}" in env:
            value = env[f"PIXELPOST_{key.upper()}"]
        elif key in cfg:
            value = cfg[key]
        else:
            value = default
        out[key] = _convert(tp, value, key)
    return out


def _convert(tp, value, key):
    if value is None or isinstance(value, tp):
        return value
    try:
        return tp(value)
    except (TypeError, ValueError):
        raise CliError("config", f"{key} expects {tp.__name__}, got {value!r}") from None


def _require(opts, *keys):
    for k in keys:
        if opts.get(k) in (None, ""):
            raise CliError("usage", f"--{k.replace('_', '-')} is required")


# option tables: key -> (type, default)
TRAIN_COMMON = {"epochs": (int, None), "lr": (float, None), "batch_size": (int, None), "seed": (int, 0),
                "cond_dropout": (float, DEFAULTS.cond_dropout), "lr_schedule": (str, "constant"),
                "max_steps": (int, 0)}
OPTIONS = {
    "gen-data": {"out": (str, None), "seed": (int, 0), "n_train": (int, DEFAULTS.n_train),
                 "n_sft": (int, DEFAULTS.n_sft), "n_eval": (int, DEFAULTS.n_eval), "n_pairs": (int, DEFAULTS.n_pairs)},
    "pretrain-ae": {"data": (str, None), "out": (str, None), "base_width": (int, DEFAULTS.ae_width),
                    "hidden": (int, DEFAULTS.ae_hidden), **TRAIN_COMMON,
                    "epochs": (int, DEFAULTS.ae_epochs), "lr": (float, DEFAULTS.ae_lr),
                    "batch_size": (int, DEFAULTS.ae_batch), "lr_schedule": (str, "cosine")},
    "pretrain-diffusion": {"data": (str, None), "ae": (str, None), "out": (str, None),
                           "backbone": (str, DEFAULTS.backbone), "width": (int, DEFAULTS.den_width),
                           "depth": (int, DEFAULTS.den_depth), **TRAIN_COMMON,
                           "epochs": (int, DEFAULTS.diff_epochs), "lr": (float, DEFAULTS.diff_lr),
                           "batch_size": (int, DEFAULTS.diff_batch), "lr_schedule": (str, "cosine")},
    "sft": {"data": (str, None), "base": (str, None), "out": (str, None), "objective": (str, "combined"),
            "lam": (float, DEFAULTS.lam), **TRAIN_COMMON, "epochs": (int, DEFAULTS.sft_epochs),
            "lr": (float, DEFAULTS.sft_lr), "batch_size": (int, DEFAULTS.sft_batch)},
    "prefs": {"data": (str, None), "base": (str, None), "out": (str, None), "mode": (str, "simpo+simpoPix"),
              "mu": (float, DEFAULTS.mu), "beta": (float, DEFAULTS.beta), **TRAIN_COMMON,
              "epochs": (int, DEFAULTS.pref_epochs), "lr": (float, DEFAULTS.pref_lr),
              "batch_size": (int, DEFAULTS.pref_batch)},
    "sample": {"model": (str, None), "out": (str, None), "n_per_class": (int, 4),
               "steps": (int, DEFAULTS.sample_steps), "guidance": (float, DEFAULTS.guidance),
               "seed": (int, 0), "run_id": (str, None)},
    "eval": {"model": (str, None), "data": (str, None), "out": (str, None),
             "n_per_class": (int, DEFAULTS.n_per_class), "steps": (int, DEFAULTS.sample_steps),
             "guidance": (float, DEFAULTS.guidance), "seed": (int, 0)},
    "plan": {"preset": (str, None), "root": (str, "runs"), "settings": (str, "full")},
    "report": {"root": (str, "runs"), "out": (str, None)},
}
FLAG_NAMES = {"lam": "--lambda"}
HELP = {
    "gen-data": "generate the procedural corpus",
    "pretrain-ae": "train the autoencoder",
    "pretrain-diffusion": "train the base latent diffusion model",
    "sft": "supervised fine-tuning (latent, pixel or combined objective)",
    "prefs": "preference fine-tuning with one of the reward modes",
    "sample": "write DDIM samples as PPM files",
    "eval": "sample a model and report hf ratio, flaw proxy and conditioning accuracy",
    "plan": "run a preset experiment plan (resumable)",
    "report": "aggregate finished plan runs into comparison tables",
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pixelpost", description="Pixel-space supervision for latent diffusion post-training.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    for name, opts in OPTIONS.items():
        p = sub.add_parser(name, help=HELP[name], description=HELP[name])
        p.add_argument("--config", help="flat key = value file with defaults for the options below")
        for key, (tp, default) in opts.items():
            flag = FLAG_NAMES.get(key, "--" + key.replace("_", "-"))
            hint = f" (default {default})" if default not in (None, "") else ""
            if name == "plan" and key == "preset":
                p.add_argument(flag, dest=key, choices=sorted(PRESETS), help="experiment preset")
            else:
                p.add_argument(flag, dest=key, type=tp, default=None, help=f"{key}{hint}")
        if name == "plan":
            p.add_argument("--seed", dest="seeds", type=int, action="append",
                           help=f"preset seed, repeatable (default {' '.join(map(str, PRESET_SEEDS))})")
            p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                           help="override one plan setting")
    return parser


# --------------------------------------------------------------------------
# commands


def _run_config(phase, o, **kw) -> dict:
    try:
        return RunConfig(phase=phase, epochs=o["epochs"], lr=o["lr"], batch_size=o["batch_size"], seed=o["seed"],
                         cond_dropout=o["cond_dropout"], lr_schedule=o["lr_schedule"], max_steps=o["max_steps"],
                         **kw).to_dict()
    except (TrainingError, LossError) as exc:
        raise CliError("config", str(exc)) from None


def _execute(kind, config, inputs, out):
    if run_complete(out, kind, config, inputs):
        print(f"{out}: already complete (verified)")
        return read_manifest(out)
    m = execute(kind, config, inputs, out)
    print(f"{out}: {kind} done in {m['wall_clock']:.1f}s")
    return m


def cmd_gen_data(o):
    _require(o, "out")
    from .data import CorpusSpec

    spec = CorpusSpec(n_train=o["n_train"], n_sft=o["n_sft"], n_eval=o["n_eval"], n_pairs=o["n_pairs"], seed=o["seed"])
    spec.validate()
    _execute("gen-data", {"corpus": spec.to_dict()}, {}, Path(o["out"]))


def cmd_pretrain_ae(o):
    _require(o, "data", "out")
    from .models import AutoencoderConfig

    ae = AutoencoderConfig(base_width=o["base_width"], hidden=o["hidden"])
    run = _run_config("pretrain_ae", o, weight_decay=0.0)
    _execute("pretrain-ae", {"autoencoder": ae.to_dict(), "run": run}, {"data": o["data"]}, Path(o["out"]))


def cmd_pretrain_diffusion(o):
    _require(o, "data", "ae", "out")
    from .models import BACKBONES, DenoiserConfig

    if o["backbone"] not in BACKBONES:
        raise CliError("config", f"unknown backbone {o['backbone']!r}; expected one of {sorted(BACKBONES)}")
    ae = load_bundle(Path(o["ae"]) / "model.ldpx")
    c, h, _ = ae.ae_config.latent_shape
    den = DenoiserConfig(variant=o["backbone"], latent_channels=c, latent_size=h, width=o["width"], depth=o["depth"])
    run = _run_config("pretrain_diffusion", o)
    _execute("pretrain-diffusion", {"denoiser": den.to_dict(), "run": run},
             {"data": o["data"], "ae": o["ae"]}, Path(o["out"]))


def cmd_sft(o):
    _require(o, "data", "base", "out")
    run = _run_config("sft", o, objective=o["objective"], lam=o["lam"])
    _execute("sft", {"run": run}, {"data": o["data"], "base": o["base"]}, Path(o["out"]))


def cmd_prefs(o):
    _require(o, "data", "base", "out")
    run = _run_config("preference", o, objective=o["mode"], mu=o["mu"], beta=o["beta"])
    _execute("prefs", {"run": run}, {"data": o["data"], "base": o["base"]}, Path(o["out"]))


def _sampler(o) -> SamplerConfig:
    try:
        return SamplerConfig(o["steps"], o["guidance"])
    except SamplerError as exc:
        raise CliError("config", str(exc)) from None


def _model_path(model) -> Path:
    p = Path(model)
    return p / "model.ldpx" if p.is_dir() else p


def cmd_sample(o):
    _require(o, "model", "out")
    bundle = load_bundle(_model_path(o["model"]))
    cfg = _sampler(o)
    images, labels = sample_classes(bundle, cfg, o["n_per_class"], o["seed"])
    run_id = o["run_id"] or Path(o["model"]).resolve().name.replace(".ldpx", "")
    paths = write_samples(o["out"], run_id, images, labels, o["seed"], cfg.num_steps)
    print(f"wrote {len(paths)} samples to {o['out']}")


def cmd_eval(o):
    _require(o, "model", "data", "out")
    config = {"sampler": _sampler(o).to_dict(), "n_per_class": o["n_per_class"], "seed": o["seed"]}
    m = _execute("eval", config, {"model": o["model"], "data": o["data"]}, Path(o["out"]))
    with open(Path(o["out"]) / "report.csv") as f:
        for row in csv.DictReader(f):
            print(f"{row['metric']}: {row['value']}")
    return m


def _settings(args, o) -> PlanSettings:
    if o["settings"] not in SETTINGS:
        raise CliError("config", f"unknown settings {o['settings']!r}; expected one of {sorted(SETTINGS)}")
    values = {}
    if args.config:
        values.update({k: v for k, v in read_config(args.config).items() if k not in OPTIONS["plan"]})
    for k, v in os.environ.items():
        key = k[len("PIXELPOST_"):].lower()
        if k.startswith("PIXELPOST_") and key in PlanSettings.__dataclass_fields__:
            values[key] = v
    for item in args.overrides:
        if "=" not in item:
            raise CliError("usage", f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        values[k.strip().replace("-", "_")] = v.strip()
    try:
        return SETTINGS[o["settings"]].override(values)
    except PlanError as exc:
        raise CliError("config", str(exc)) from None


def cmd_plan(args, o):
    _require(o, "preset")
    settings = _settings(args, o)
    seeds = args.seeds or list(PRESET_SEEDS)
    plan: ExperimentPlan = preset_plan(o["preset"], settings, seeds)
    root = Path(o["root"])
    run_plan(plan, root)
    if o["preset"] in ("table5", "table6"):
        for seed in seeds:
            path = write_comparison(root / f"{o['preset']}-s{seed}.csv", comparison_rows(root, o["preset"], seed))
            print(f"comparison table: {path}")
    else:
        for seed in seeds:
            print(f"curves: {root / f'curves-s{seed}' / 'curves.csv'}")


def cmd_report(o):
    root = Path(o["root"])
    rows = []
    if root.is_dir():
        for preset in ("table5", "table6"):
            for seed in sorted({int(p.name.rsplit("-s", 1)[1]) for p in root.glob("eval-base-s*")}):
                try:
                    rows += comparison_rows(root, preset, seed)
                except (OSError, KeyError):
                    continue
    if not rows:
        raise CliError("report", f"no runs found under {root}", code=1)
    out = Path(o["out"]) if o["out"] else root / "report.csv"
    write_comparison(out, rows)
    print(f"{'preset':8} {'seed':>4} {'variant':16} {'hf':>8} {'target':>8} {'flaw':>10} {'acc':>6}")
    for r in rows:
        print(f"{r['preset']:8} {r['seed']:>4} {r['variant']:16} {r['hf_energy_ratio']:8.4f} {r['target_hf']:8.4f} "
              f"{r['flaw_mse']:10.6f} {r['accuracy']:6.3f}")
    print(f"wrote {out}")


COMMANDS = {"gen-data": cmd_gen_data, "pretrain-ae": cmd_pretrain_ae, "pretrain-diffusion": cmd_pretrain_diffusion,
            "sft": cmd_sft, "prefs": cmd_prefs, "sample": cmd_sample, "eval": cmd_eval, "report": cmd_report}


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = build_parser().parse_args(argv)
        if not args.command:
            raise CliError("usage", "missing command; run pixelpost --help")
        extra = PlanSettings.__dataclass_fields__ if args.command == "plan" else ()
        opts = _resolve(args, OPTIONS[args.command], extra_keys=extra)
        if args.command == "plan":
            cmd_plan(args, opts)
        else:
            COMMANDS[args.command](opts)
        return 0
    except CliError as exc:
        print(f"pixelpost: error: {exc.kind}: {_one_line(exc)}", file=sys.stderr)
        return exc.code
    except (PlanError, TrainingError, CheckpointError, ModelError, SamplerError, LossError, CorpusError,
            ScheduleError) as exc:
        print(f"pixelpost: error: {type(exc).__name__}: {_one_line(exc)}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"pixelpost: error: io: {_one_line(exc)}", file=sys.stderr)
        return 1


def _one_line(exc) -> str:
    return " ".join(str(exc).split())


if __name__ == "__main__":
    sys.exit(main())
