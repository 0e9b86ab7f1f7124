"""Command-line entry point.

Subcommands: gen-data, train, translate, eval, ablate, train-segmenter.
Every command resolves its configuration (defaults <- config file <- flags),
writes the resolved document next to its outputs and derives all randomness
from the single `seed` key. Exit codes: 0 success, 2 configuration error,
3 runtime/numerical abort.
"""

from __future__ import annotations

import argparse
import copy
import dataclasses
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import evaluation
from .data import DatasetError, PhantomSpec, decode_image_png, encode_image_png, generate_phantom_dataset, load_dataset
from .losses import LossWeights, NonFiniteLossError
from .networks import ConfigError, CriticConfig, GeneratorConfig
from .training import Trainer, TrainConfig, TrainingDivergedError, load_generator


DEFAULT_CONFIG = {
    "seed": 0,
    "out": "runs/default",
    "manifest": None,
    "data": {
        "resolution": 64,
        "n_modalities": 3,
        "n_anatomies": 60,
        "organ_count_range": [2, 5],
        "noise_sigma": 0.05,
    },
    "network": {
        "base_channels": 32,
        "depth": 3,
        "middle_blocks": 2,
        "critic_base_channels": 64,
        "critic_n_strided": 3,
    },
    "train": {
        "lr_g_s": 1e-4,
        "lr_d": 3e-4,
        "adam_beta1": 0.5,
        "adam_beta2": 0.9,
        "batch_size": 4,
        "epochs": 50,
        "ema_decay": 0.999,
        "d_steps_per_g_step": 1,
        "weights": {
            "lambda_cls_r": 1.0,
            "lambda_cls_f": 1.0,
            "lambda_rec": 1.0,
            "lambda_cross": 50.0,
            "lambda_u": 0.01,
            "lambda_gp": 10.0,
        },
    },
    "variant": {
        "use_shape_controller": True,
        "use_target_stream": True,
        "use_crossing": True,
    },
    "eval": {
        "metrics": ["fid", "s_score", "seg", "l1"],
        "embedder_seed": 0,
        "ablation_seeds": [],
        "enrichment_modality": 2,
        "enrichment_seeds": [0, 1, 2],
    },
}


def _merge(defaults: dict, overrides: dict, path: str = "") -> dict:
    out = copy.deepcopy(defaults)
    for key, value in overrides.items():
        here = f"{path}.{key}" if path else key
        if key not in defaults:
            raise ConfigError(f"unknown config key: {here}")
        if isinstance(defaults[key], dict) and defaults[key]:
            if not isinstance(value, dict):
                raise ConfigError(f"config key {here} must be an object")
            out[key] = _merge(defaults[key], value, here)
        else:
            out[key] = value
    return out


def resolve_config(config_path: str | None, seed: int | None, out: str | None) -> dict:
    overrides = {}
    if config_path:
        p = Path(config_path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        try:
            overrides = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc}") from exc
        if not isinstance(overrides, dict):
            raise ConfigError("config file must hold a JSON object")
    cfg = _merge(DEFAULT_CONFIG, overrides)
    if seed is not None:
        cfg["seed"] = seed
    if out is not None:
        cfg["out"] = out
    return cfg


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()[:16]


def write_resolved(cfg: dict, command: str, out_dir: Path, extra: dict | None = None) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    doc = dict(cfg)
    doc["command"] = command
    if extra:
        doc["args"] = extra
    doc["config_hash"] = config_hash(cfg)
    (out_dir / "resolved_config.json").write_text(json.dumps(doc, indent=1, sort_keys=True))


def _phantom_spec(cfg: dict) -> PhantomSpec:
    d = cfg["data"]
    return PhantomSpec(
        resolution=d["resolution"],
        n_modalities=d["n_modalities"],
        n_anatomies=d["n_anatomies"],
        organ_count_range=tuple(d["organ_count_range"]),
        noise_sigma=d["noise_sigma"],
    )


def _network_cfgs(cfg: dict) -> tuple[GeneratorConfig, CriticConfig]:
    n = cfg["data"]["n_modalities"]
    net = cfg["network"]
    gen_cfg = GeneratorConfig(
        base_channels=net["base_channels"],
        depth=net["depth"],
        middle_blocks=net["middle_blocks"],
        n_modalities=n,
    )
    critic_cfg = CriticConfig(
        base_channels=net["critic_base_channels"],
        n_strided=net["critic_n_strided"],
        n_modalities=n,
    )
    return gen_cfg, critic_cfg


def _train_cfg(cfg: dict) -> TrainConfig:
    t = dict(cfg["train"])
    t["weights"] = LossWeights(**t["weights"])
    return TrainConfig(seed=cfg["seed"], **t)


def _manifest_path(cfg: dict, flag_value: str | None) -> Path:
    value = flag_value or cfg["manifest"]
    if not value:
        raise ConfigError("no dataset manifest given (set --data or the 'manifest' key)")
    return Path(value)


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args) -> int:
    cfg = resolve_config(args.config, args.seed, args.out)
    out = Path(cfg["out"])
    write_resolved(cfg, "gen-data", out)
    manifest = generate_phantom_dataset(_phantom_spec(cfg), out, cfg["seed"])
    print(f"wrote {manifest}")
    return 0


def cmd_train(args) -> int:
    cfg = resolve_config(args.config, args.seed, args.out)
    out = Path(cfg["out"])
    dataset = load_dataset(_manifest_path(cfg, args.data))
    write_resolved(cfg, "train", out, {"data": str(args.data), "resume": str(args.resume)})
    if args.resume:
        trainer = Trainer.load(Path(args.resume), n_modalities=dataset.n_modalities)
        # resume keeps the checkpoint's recipe but trains to the resolved epoch count
        trainer.train_cfg = dataclasses.replace(trainer.train_cfg, epochs=cfg["train"]["epochs"])
    else:
        gen_cfg, critic_cfg = _network_cfgs(cfg)
        trainer = Trainer(gen_cfg, critic_cfg, _train_cfg(cfg), **cfg["variant"])
    final = trainer.train(dataset, out, log_every=1)
    print(f"wrote {final}")
    return 0


def cmd_translate(args) -> int:
    gen = load_generator(Path(args.ckpt), ema=args.ema)
    in_dir, out_dir = Path(args.input_dir), Path(args.out_dir)
    if not in_dir.is_dir():
        raise ConfigError(f"input directory not found: {in_dir}")
    paths = sorted(in_dir.glob("*.png"))
    if not paths:
        raise ConfigError(f"no PNG images under {in_dir}")
    if not 0 <= args.target < gen.cfg.n_modalities:
        raise ConfigError(
            f"target modality {args.target} out of range [0, {gen.cfg.n_modalities})"
        )
    out_dir.mkdir(parents=True, exist_ok=True)
    images = np.stack([decode_image_png(p) for p in paths])
    fakes = evaluation.translate_images(gen, images, args.target)
    for p, fake in zip(paths, fakes):
        encode_image_png(fake, out_dir / p.name)
    print(f"translated {len(paths)} images -> {out_dir}")
    return 0


def _load_segmenters(seg_dir: str | None, dataset) -> dict[int, evaluation.Segmenter]:
    if not seg_dir:
        raise ConfigError(
            "s_score/seg metrics need --segmenters pointing at a directory "
            "produced by the train-segmenter command"
        )
    segmenters = {}
    for m in dataset.modalities:
        path = Path(seg_dir) / f"segmenter_{m.name}.npz"
        if not path.exists():
            raise ConfigError(
                f"missing segmenter for modality {m.name}: {path}; "
                "run the train-segmenter command first"
            )
        segmenters[m.id] = evaluation.load_segmenter(path)
    return segmenters


def cmd_eval(args) -> int:
    cfg = resolve_config(args.config, args.seed, args.out)
    out = Path(cfg["out"])
    dataset = load_dataset(_manifest_path(cfg, args.data))
    metrics = tuple(args.metrics.split(",")) if args.metrics else tuple(cfg["eval"]["metrics"])
    known = {"fid", "s_score", "seg", "l1"}
    unknown = set(metrics) - known
    if unknown:
        raise ConfigError(f"unknown metrics: {sorted(unknown)}; choose from {sorted(known)}")
    segmenters = None
    if "s_score" in metrics or "seg" in metrics:
        segmenters = _load_segmenters(args.segmenters, dataset)
    write_resolved(cfg, "eval", out, {"ckpt": args.ckpt, "data": str(args.data), "metrics": list(metrics)})
    gen = load_generator(Path(args.ckpt), ema=args.ema)
    report = evaluation.evaluate_generator(
        gen,
        dataset,
        metrics=metrics,
        segmenters=segmenters,
        embedder=evaluation.FeatureEmbedder(seed=cfg["eval"]["embedder_seed"]),
    )
    report["checkpoint"] = str(args.ckpt)
    report["config_hash"] = config_hash(cfg)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.json").write_text(json.dumps(report, indent=1, sort_keys=True))
    fields = sorted({k for v in report["per_modality"].values() for k in v})
    with open(out / "metrics.csv", "w") as fh:
        fh.write("modality," + ",".join(fields) + "\n")
        for name, entry in report["per_modality"].items():
            fh.write(name + "," + ",".join(f"{entry[k]:.6g}" for k in fields) + "\n")
        fh.write("mean," + ",".join(f"{report['mean'][k]:.6g}" for k in fields) + "\n")
    print(json.dumps(report["mean"], indent=1, sort_keys=True))
    return 0


def cmd_ablate(args) -> int:
    cfg = resolve_config(args.config, args.seed, args.out)
    out = Path(cfg["out"])
    dataset = load_dataset(_manifest_path(cfg, args.data))
    gen_cfg, critic_cfg = _network_cfgs(cfg)
    write_resolved(cfg, "ablate", out, {"data": str(args.data)})
    seeds = cfg["eval"]["ablation_seeds"] or [cfg["seed"]]
    csv_path = evaluation.run_ablation(
        evaluation.STANDARD_VARIANTS,
        dataset,
        seeds,
        gen_cfg,
        critic_cfg,
        _train_cfg(cfg),
        out,
    )
    print(f"wrote {csv_path}")
    return 0


def cmd_train_segmenter(args) -> int:
    cfg = resolve_config(args.config, args.seed, args.out)
    out = Path(cfg["out"])
    dataset = load_dataset(_manifest_path(cfg, args.data))
    write_resolved(cfg, "train-segmenter", out, {"data": str(args.data)})
    targets = (
        [m for m in dataset.modalities if m.id == args.modality]
        if args.modality is not None
        else dataset.modalities
    )
    if not targets:
        raise ConfigError(f"modality {args.modality} not in dataset")
    for m in targets:
        seg, d = evaluation.train_reference_segmenter(dataset, m.id, seed=cfg["seed"])
        path = out / f"segmenter_{m.name}.npz"
        seg.save(path)
        print(f"{m.name}: held-out DICE {d:.4f} -> {path}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="roigan",
        description="Target-area-aware multi-modality image translation on phantom data",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file (defaults otherwise)")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", help="override the output directory")

    p = sub.add_parser("gen-data", help="generate a phantom dataset")
    common(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train the translation model")
    common(p)
    p.add_argument("--data", help="dataset manifest path")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("translate", help="translate a directory of PNG images")
    p.add_argument("ckpt")
    p.add_argument("input_dir")
    p.add_argument("source", type=int, help="source modality id (informational)")
    p.add_argument("target", type=int, help="target modality id")
    p.add_argument("out_dir")
    group = p.add_mutually_exclusive_group()
    group.add_argument("--ema", dest="ema", action="store_true", default=True,
                       help="use EMA generator weights (default)")
    group.add_argument("--raw", dest="ema", action="store_false",
                       help="use raw generator weights")
    p.set_defaults(func=cmd_translate)

    p = sub.add_parser("eval", help="compute metrics for a checkpoint")
    common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", help="dataset manifest path")
    p.add_argument("--metrics", help="comma list: fid,s_score,seg,l1")
    p.add_argument("--segmenters", help="directory with segmenter_<mod>.npz files")
    group = p.add_mutually_exclusive_group()
    group.add_argument("--ema", dest="ema", action="store_true", default=True)
    group.add_argument("--raw", dest="ema", action="store_false")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train and score the standard ablation variants")
    common(p)
    p.add_argument("--data", help="dataset manifest path")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("train-segmenter", help="train reference segmenters on real data")
    common(p)
    p.add_argument("--data", help="dataset manifest path")
    p.add_argument("--modality", type=int, help="train only this modality id")
    p.set_defaults(func=cmd_train_segmenter)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, DatasetError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (TrainingDivergedError, NonFiniteLossError, OSError) as exc:
        print(f"abort: {exc}", file=sys.stderr)
        return 3


def entry() -> None:
    sys.exit(main(sys.argv[1:]))


if __name__ == "__main__":
    entry()
