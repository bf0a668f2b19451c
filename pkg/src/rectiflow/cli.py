"""Command-line entry point.

Subcommands: dataset, train, finetune, sample, eval, sweep. Configuration
comes from an optional JSON file (sections: dataset, train, lora, sample,
eval) merged with dotted-path flag overrides (`--train.epochs 40`); flags
win. Unknown sections, keys, or flags are rejected. Every run writes the
fully resolved configuration to `<out>/run_config.json`.

Exit codes: 0 ok, 2 configuration or prompt error, 3 I/O error,
4 training divergence, 5 dataset precondition failure.

The default output root is $RECTIFLOW_OUT (falling back to ./out);
--out overrides it. Output directories are created one level deep: the
parent must already exist.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from .errors import (CaptionParseError, CheckpointFormatError, CompatibilityError,
                     ConfigError, DataError, DivergenceError, RectiflowError)
from . import evalharness as ev
from .lesiondata import LABELS, DatasetConfig, Manifest, build_dataset
from .sampler import INTEGRATORS, SampleSpec, generate
from .trainer import (LoraConfig, TrainConfig, finetune_lora, load_checkpoint,
                      save_checkpoint, train_base, write_loss_curve)

# ---------------------------------------------------------------------------
# configuration schema: section -> key -> (type tag, default)

_SCHEMA: dict[str, dict[str, tuple[str, object]]] = {
    "dataset": {
        "n_per_class": ("int", 100),
        "resolutions": ("int_list", [16]),
        "test_fraction": ("float", 0.2),
        "seed": ("int", 1),
    },
    "train": {
        "epochs": ("int", 30),
        "batch_size": ("int", 32),
        "learning_rate": ("float", 1e-3),
        "schedule": ("str", "cosine"),
        "seed": ("int", 1),
        "resolution": ("int", 16),
        "hidden": ("optional_int", None),
    },
    "lora": {
        "rank": ("int", 8),
        "alpha": ("float", 8.0),
        "layers": ("bool_list", [True, True, True]),
    },
    "sample": {
        "prompt": ("str", "This is an image containing a benign lesion."),
        "steps": ("int", 20),
        "integrator": ("str", "euler"),
        "seed": ("int", 0),
        "count": ("int", 1),
        "dump_trajectory": ("bool", False),
    },
    "eval": {
        "seeds": ("int_list", [1, 2, 3, 4, 5]),
        "resolution": ("int", 16),
        "gen_seed": ("int", 9000),
        "gen_steps": ("int", 20),
        "scenario": ("str", "both"),
        "syn_per_class_i": ("int", 300),
        "real_per_class_ii": ("int", 125),
        "syn_per_class_ii": ("int", 250),
        "real_counts": ("int_list", [250, 500]),
        "x_values": ("float_list", [0.0, 0.25, 0.5, 0.75, 1.0, 1.75]),
        "include_pure_synthetic": ("bool", True),
        "classifier_epochs": ("int", 40),
        "classifier_batch_size": ("int", 32),
        "classifier_learning_rate": ("float", 1e-2),
        "classifier_schedule": ("str", "cosine"),
    },
}

_SECTIONS_BY_COMMAND = {
    "dataset": ("dataset",),
    "train": ("train",),
    "finetune": ("train", "lora"),
    "sample": ("sample",),
    "eval": ("eval",),
    "sweep": ("eval",),
}

# convenience aliases: flag -> (section, key)
_ALIASES = {
    "dataset": {"n_per_class": ("dataset", "n_per_class")},
    "train": {},
    "finetune": {"lora_rank": ("lora", "rank"), "lora_alpha": ("lora", "alpha")},
    "sample": {
        "prompt": ("sample", "prompt"),
        "steps": ("sample", "steps"),
        "integrator": ("sample", "integrator"),
        "count": ("sample", "count"),
        "dump_trajectory": ("sample", "dump_trajectory"),
    },
    "eval": {"scenario": ("eval", "scenario")},
    "sweep": {},
}

# the section key that the global --seed flag overrides, per command
_SEED_TARGET = {
    "dataset": ("dataset", "seed"),
    "train": ("train", "seed"),
    "finetune": ("train", "seed"),
    "sample": ("sample", "seed"),
    "eval": ("eval", "gen_seed"),
    "sweep": ("eval", "gen_seed"),
}


def _parse_value(kind: str, raw, where: str):
    try:
        if kind == "int":
            if isinstance(raw, bool):
                raise ValueError("boolean is not an integer")
            return int(raw)
        if kind == "optional_int":
            if raw is None or raw == "none" or raw == "null":
                return None
            return int(raw)
        if kind == "float":
            if isinstance(raw, bool):
                raise ValueError("boolean is not a number")
            return float(raw)
        if kind == "str":
            if not isinstance(raw, str):
                raise ValueError(f"expected a string, got {type(raw).__name__}")
            return raw
        if kind == "bool":
            if isinstance(raw, bool):
                return raw
            if isinstance(raw, str):
                low = raw.strip().lower()
                if low in ("1", "true", "yes", "on"):
                    return True
                if low in ("0", "false", "no", "off"):
                    return False
            raise ValueError(f"expected a boolean, got {raw!r}")
        if kind in ("int_list", "float_list", "bool_list"):
            item_kind = kind.split("_")[0]
            if isinstance(raw, str):
                raw = [part for part in raw.split(",") if part != ""]
            if not isinstance(raw, (list, tuple)):
                raise ValueError(f"expected a list, got {type(raw).__name__}")
            return [_parse_value(item_kind, item, where) for item in raw]
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from exc
    raise ConfigError(f"{where}: unknown value kind {kind}")


def _resolved_defaults() -> dict[str, dict[str, object]]:
    return {sec: {key: default for key, (_, default) in keys.items()}
            for sec, keys in _SCHEMA.items()}


def _merge_config_file(config: dict, path: Path) -> None:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object of sections")
    for section, body in raw.items():
        if section not in _SCHEMA:
            raise ConfigError(f"{path}: unknown section {section!r}; known: "
                              f"{sorted(_SCHEMA)}")
        if not isinstance(body, dict):
            raise ConfigError(f"{path}: section {section!r} must be an object")
        for key, value in body.items():
            if key not in _SCHEMA[section]:
                raise ConfigError(f"{path}: unknown key {section}.{key}; known: "
                                  f"{sorted(_SCHEMA[section])}")
            kind = _SCHEMA[section][key][0]
            config[section][key] = _parse_value(kind, value, f"{path}: {section}.{key}")


def _dest(section: str, key: str) -> str:
    return f"cfg__{section}__{key}"


def _add_section_flags(parser: argparse.ArgumentParser, command: str) -> None:
    for section in _SECTIONS_BY_COMMAND[command]:
        for key, (kind, _) in _SCHEMA[section].items():
            parser.add_argument(f"--{section}.{key.replace('_', '-')}",
                                dest=_dest(section, key), metavar="V",
                                help=f"override {section}.{key} ({kind})")
    for alias, (section, key) in _ALIASES[command].items():
        kind = _SCHEMA[section][key][0]
        parser.add_argument(f"--{alias.replace('_', '-')}",
                            dest=_dest(section, key), metavar="V",
                            help=f"alias for {section}.{key} ({kind})")


def _apply_flag_overrides(config: dict, command: str, args: argparse.Namespace) -> None:
    for section in _SECTIONS_BY_COMMAND[command]:
        for key, (kind, _) in _SCHEMA[section].items():
            raw = getattr(args, _dest(section, key), None)
            if raw is not None:
                config[section][key] = _parse_value(kind, raw, f"--{section}.{key}")
    if args.seed is not None:
        section, key = _SEED_TARGET[command]
        config[section][key] = _parse_value("int", args.seed, "--seed")


def _make_out_dir(args: argparse.Namespace, command: str) -> Path:
    if args.out is not None:
        out = Path(args.out)
    else:
        root = Path(os.environ.get("RECTIFLOW_OUT", "out"))
        root.mkdir(exist_ok=True)
        out = root / command
    out.mkdir(exist_ok=True)
    return out


def _write_run_config(out: Path, command: str, args: argparse.Namespace,
                      config: dict, inputs: dict) -> None:
    payload = {
        "command": command,
        "out": str(out),
        "threads": args.threads,
        "inputs": inputs,
        "config": {sec: config[sec] for sec in _SECTIONS_BY_COMMAND[command]},
    }
    with open(out / "run_config.json", "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2)
        f.write("\n")


def _train_config(config: dict, with_lora: bool) -> TrainConfig:
    t = config["train"]
    lora = None
    if with_lora:
        raw = config["lora"]
        layers = raw["layers"]
        if len(layers) != 3:
            raise ConfigError(f"lora.layers needs exactly 3 entries, got {layers}")
        lora = LoraConfig(rank=raw["rank"], alpha=raw["alpha"], layers=tuple(layers))
    cfg = TrainConfig(epochs=t["epochs"], batch_size=t["batch_size"],
                      learning_rate=t["learning_rate"], schedule=t["schedule"],
                      seed=t["seed"], resolution=t["resolution"], hidden=t["hidden"],
                      freeze_base=with_lora, lora=lora)
    cfg.validate()
    return cfg


def _harness_config(config: dict) -> ev.HarnessConfig:
    e = config["eval"]
    return ev.HarnessConfig(
        seeds=tuple(e["seeds"]),
        resolution=e["resolution"],
        gen_seed=e["gen_seed"],
        gen_steps=e["gen_steps"],
        classifier=ev.ClassifierConfig(
            epochs=e["classifier_epochs"], batch_size=e["classifier_batch_size"],
            learning_rate=e["classifier_learning_rate"],
            schedule=e["classifier_schedule"]),
        scenario_i_syn_per_class=e["syn_per_class_i"],
        scenario_ii_real_per_class=e["real_per_class_ii"],
        scenario_ii_syn_per_class=e["syn_per_class_ii"],
        real_counts=tuple(e["real_counts"]),
        x_values=tuple(e["x_values"]),
        include_pure_synthetic=e["include_pure_synthetic"],
    )


# ---------------------------------------------------------------------------
# commands


def _cmd_dataset(args, config) -> int:
    out = _make_out_dir(args, "dataset")
    d = config["dataset"]
    ds_cfg = DatasetConfig(n_per_class=d["n_per_class"],
                           resolutions=tuple(d["resolutions"]),
                           test_fraction=d["test_fraction"], seed=d["seed"])
    manifest = build_dataset(ds_cfg, out)
    _write_run_config(out, "dataset", args, config, {})
    print(f"manifest: {out / 'manifest.jsonl'}")
    print(f"{'resolution':>10s} {'label':>10s} {'train':>6s} {'test':>6s}")
    for res in ds_cfg.resolutions:
        for label in LABELS:
            n_train = len(manifest.select(split="train", resolution=res, label=label))
            n_test = len(manifest.select(split="test", resolution=res, label=label))
            print(f"{res:>10d} {label:>10s} {n_train:>6d} {n_test:>6d}")
    return 0


def _cmd_train(args, config) -> int:
    out = _make_out_dir(args, "train")
    cfg = _train_config(config, with_lora=False)
    manifest = Manifest.load(Path(args.manifest))
    ckpt, curve = train_base(manifest, cfg)
    save_checkpoint(ckpt, out / "model.ckpt")
    write_loss_curve(curve, out / "loss.csv")
    _write_run_config(out, "train", args, config, {"manifest": str(args.manifest)})
    n_params = sum(p.size for p in ckpt.base_params)
    print(f"checkpoint: {out / 'model.ckpt'}")
    print(f"final loss: {curve[-1]!r}")
    print(f"trainable parameters: {n_params}")
    return 0


def _cmd_finetune(args, config) -> int:
    out = _make_out_dir(args, "finetune")
    cfg = _train_config(config, with_lora=True)
    manifest = Manifest.load(Path(args.manifest))
    base = load_checkpoint(Path(args.base))
    ckpt, curve = finetune_lora(base, manifest, cfg)
    save_checkpoint(ckpt, out / "model.ckpt")
    if curve:
        write_loss_curve(curve, out / "loss.csv")
    _write_run_config(out, "finetune", args, config,
                      {"manifest": str(args.manifest), "base": str(args.base)})
    trainable = sum(p.size for p in ckpt.adapter_params)
    print(f"checkpoint: {out / 'model.ckpt'}")
    print(f"final loss: {curve[-1]!r}" if curve else "final loss: n/a (0 epochs)")
    print(f"trainable parameters: {trainable}")
    print("base parameters: frozen (byte-identical to the input checkpoint)")
    return 0


def _cmd_sample(args, config) -> int:
    out = _make_out_dir(args, "sample")
    s = config["sample"]
    spec = SampleSpec(prompt=s["prompt"], steps=s["steps"], integrator=s["integrator"],
                      seed=s["seed"], count=s["count"],
                      dump_trajectory=s["dump_trajectory"])
    spec.validate()
    ckpt = load_checkpoint(Path(args.ckpt))
    paths = generate(ckpt, spec, out)
    _write_run_config(out, "sample", args, config, {"ckpt": str(args.ckpt)})
    for p in paths:
        print(p)
    return 0


def _cmd_eval(args, config) -> int:
    out = _make_out_dir(args, "eval")
    cfg = _harness_config(config)
    scenario = config["eval"]["scenario"]
    if scenario not in ("i", "ii", "both"):
        raise ConfigError(f"eval.scenario must be i, ii, or both, got {scenario!r}")
    manifest = Manifest.load(Path(args.real))
    ckpt = load_checkpoint(Path(args.ckpt))
    rep_i, rep_ii = ev.run_scenarios(manifest, ckpt, cfg, roc_sink=ev.make_roc_sink(out))
    reports = {"i": [rep_i], "ii": [rep_ii], "both": [rep_i, rep_ii]}[scenario]
    paths = ev.write_reports(reports, out, "scenarios")
    _write_run_config(out, "eval", args, config,
                      {"real": str(args.real), "ckpt": str(args.ckpt)})
    print(Path(paths["table"]).read_text(), end="")
    for p in paths.values():
        print(p)
    return 0


def _cmd_sweep(args, config) -> int:
    out = _make_out_dir(args, "sweep")
    cfg = _harness_config(config)
    manifest = Manifest.load(Path(args.real))
    ckpt = load_checkpoint(Path(args.ckpt))
    reports = ev.run_ratio_sweep(manifest, ckpt, cfg, roc_sink=ev.make_roc_sink(out))
    paths = ev.write_reports(reports, out, "sweep")
    _write_run_config(out, "sweep", args, config,
                      {"real": str(args.real), "ckpt": str(args.ckpt)})
    print(Path(paths["table"]).read_text(), end="")
    for p in paths.values():
        print(p)
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rectiflow",
        description="Rectified-flow lesion-image generator and evaluation harness.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser, command: str):
        p.add_argument("--config", type=Path, default=None,
                       help="JSON config file (sections: dataset, train, lora, sample, eval)")
        p.add_argument("--seed", type=str, default=None,
                       help="override the command's primary seed")
        p.add_argument("--threads", type=int, default=1,
                       help="worker cap for module internals (default 1; "
                            "current modules run sequentially)")
        p.add_argument("--out", type=Path, default=None,
                       help="output directory (default: $RECTIFLOW_OUT/<command>)")
        _add_section_flags(p, command)

    p = sub.add_parser("dataset", help="render a labeled lesion dataset")
    common(p, "dataset")

    p = sub.add_parser("train", help="train a base velocity-field model")
    p.add_argument("--manifest", type=Path, required=True, help="dataset manifest path")
    common(p, "train")

    p = sub.add_parser("finetune", help="train low-rank adapters on a frozen base model")
    p.add_argument("--manifest", type=Path, required=True, help="dataset manifest path")
    p.add_argument("--base", type=Path, required=True, help="base checkpoint path")
    common(p, "finetune")

    p = sub.add_parser("sample", help="generate images from a checkpoint")
    p.add_argument("--ckpt", type=Path, required=True, help="checkpoint path")
    common(p, "sample")

    p = sub.add_parser("eval", help="run the two fixed training scenarios")
    p.add_argument("--real", type=Path, required=True, help="real dataset manifest path")
    p.add_argument("--ckpt", type=Path, required=True, help="generator checkpoint path")
    common(p, "eval")

    p = sub.add_parser("sweep", help="run the real-to-synthetic ratio sweep")
    p.add_argument("--real", type=Path, required=True, help="real dataset manifest path")
    p.add_argument("--ckpt", type=Path, required=True, help="generator checkpoint path")
    common(p, "sweep")

    return parser


_HANDLERS = {
    "dataset": _cmd_dataset,
    "train": _cmd_train,
    "finetune": _cmd_finetune,
    "sample": _cmd_sample,
    "eval": _cmd_eval,
    "sweep": _cmd_sweep,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = _resolved_defaults()
        if args.config is not None:
            _merge_config_file(config, args.config)
        _apply_flag_overrides(config, args.command, args)
        if args.threads < 1:
            raise ConfigError(f"--threads must be >= 1, got {args.threads}")
        return _HANDLERS[args.command](args, config)
    except (ConfigError, CaptionParseError, CheckpointFormatError,
            CompatibilityError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 5
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except RectiflowError as exc:  # any remaining library error is a config issue
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
