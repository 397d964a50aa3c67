"""Command-line interface: dataset generation, pretraining, fine-tuning,
evaluation, sampling, and label-smoothing export.

Every command accepts --config (a JSON file) plus per-field flag overrides;
unknown config keys are rejected.  All randomness is controlled by --seed.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np
import torch

from dts import data as dts_data
from dts.checkpoint import load_into, load_manifest
from dts.diffusion import build_schedule, sample_segmentation
from dts.errors import ConfigError
from dts.knls import (SmoothingConfig, class_centroids, dataset_geometry,
                      one_hot, smooth_labels)
from dts.metrics import evaluate
from dts.network import DTSNet, ModelConfig
from dts.train import (PretrainConfig, TrainConfig, evaluate_model, pretrain,
                       train)


# ---------------------------------------------------------------------------
# config plumbing


def _coerce_tuples(cls, data: dict) -> dict:
    """JSON arrays -> tuples for tuple-typed dataclass fields."""
    out = dict(data)
    for f in dataclasses.fields(cls):
        if f.name in out and isinstance(out[f.name], list):
            out[f.name] = tuple(tuple(v) if isinstance(v, list) else v
                                for v in out[f.name])
    return out


def dataclass_from(cls, data: dict, where: str):
    allowed = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ConfigError(f"unknown {where} config keys: {unknown}")
    return cls(**_coerce_tuples(cls, data))


# a config file may bundle sections for several commands (e.g. one experiment
# file reused for pretrain then train); each command reads only its own
KNOWN_SECTIONS = {"phantom", "model", "train", "pretrain", "smoothing",
                  "n", "seed", "train_frac"}


def read_config(path, where="config") -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        raw = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"invalid JSON in {p}: {e}") from e
    if not isinstance(raw, dict):
        raise ConfigError(f"{where} must be a JSON object")
    unknown = sorted(set(raw) - KNOWN_SECTIONS)
    if unknown:
        raise ConfigError(f"unknown {where} sections: {unknown} "
                          f"(expected a subset of {sorted(KNOWN_SECTIONS)})")
    return raw


def _apply_overrides(section: dict, args: argparse.Namespace,
                     mapping: dict) -> dict:
    out = dict(section)
    for flag, key in mapping.items():
        val = getattr(args, flag, None)
        if val is not None:
            out[key] = val
    return out


def _onoff(value: str) -> bool:
    if value not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected 'on' or 'off'")
    return value == "on"


def _train_config_from(section: dict, args) -> TrainConfig:
    section = _apply_overrides(section, args, {
        "epochs": "epochs", "batch_size": "batch_size", "lr": "lr",
        "seed": "seed", "cond_mode": "cond_mode", "pretrained": "pretrained",
        "eval_every": "eval_every", "knls": "use_knls", "rba": "use_rba",
        "augment": "augment",
    })
    smoothing = section.pop("smoothing", None)
    cfg = dataclass_from(TrainConfig, section, "train")
    if smoothing is not None:
        cfg.smoothing = dataclass_from(SmoothingConfig, smoothing,
                                       "train.smoothing")
    return cfg


def _model_config_from(section: dict, args) -> ModelConfig:
    section = _apply_overrides(section, args, {"image_size": "image_size"})
    return dataclass_from(ModelConfig, section, "model")


def _load_model(checkpoint) -> tuple[DTSNet, ModelConfig, dict]:
    manifest = load_manifest(checkpoint)
    model_cfg = dataclass_from(ModelConfig,
                               _coerce_tuples(ModelConfig,
                                              manifest["config"]["model"]),
                               "checkpoint model")
    use_rba = manifest["config"].get("train", {}).get("use_rba", True)
    model = DTSNet(model_cfg, use_rba=use_rba)
    load_into(model, checkpoint)
    model.eval()
    return model, model_cfg, manifest


def _split_samples(samples, meta, split: str):
    if split == "all":
        return samples
    if split not in meta["splits"]:
        raise ConfigError(f"dataset has no '{split}' split")
    return [samples[i] for i in meta["splits"][split]]


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    raw = read_config(args.config)
    section = _apply_overrides(raw.get("phantom", {}), args,
                               {"size": "size", "classes": "num_classes"})
    # the stock per-class geometry covers 4 classes; shrink it to match a
    # smaller --classes rather than forcing a full config file
    C = section.get("num_classes")
    defaults = dts_data.PhantomConfig()
    if C is not None and C < defaults.num_classes:
        section.setdefault("canonical_centers",
                           defaults.canonical_centers[:C - 1])
        section.setdefault("radius_ranges", defaults.radius_ranges[:C - 1])
        section.setdefault("intensity_means", defaults.intensity_means[:C])
        section.setdefault("intensity_stds", defaults.intensity_stds[:C])
    cfg = dataclass_from(dts_data.PhantomConfig, section, "phantom")
    n = args.n if args.n is not None else raw.get("n", 250)
    seed = args.seed if args.seed is not None else raw.get("seed", 0)
    train_frac = (args.train_frac if args.train_frac is not None
                  else raw.get("train_frac", 0.8))
    samples = dts_data.gen_phantom(cfg, n, seed)
    dts_data.save_dataset(args.out, samples, cfg, seed, train_frac=train_frac)
    print(f"wrote {n} samples to {args.out}")
    return 0


def cmd_pretrain(args) -> int:
    raw = read_config(args.config)
    model_cfg = _model_config_from(raw.get("model", {}), args)
    section = _apply_overrides(raw.get("pretrain", {}), args, {
        "steps": "steps", "batch_size": "batch_size", "lr": "lr",
        "seed": "seed"})
    cfg = dataclass_from(PretrainConfig, section, "pretrain")
    samples, meta = dts_data.load_dataset(args.data)
    ckpt = pretrain(_split_samples(samples, meta, args.split), model_cfg,
                    cfg, args.out)
    print(f"pretrained encoder saved to {ckpt}")
    return 0


def cmd_train(args) -> int:
    raw = read_config(args.config)
    model_cfg = _model_config_from(raw.get("model", {}), args)
    cfg = _train_config_from(raw.get("train", {}), args)
    samples, meta = dts_data.load_dataset(args.data)
    train_s = _split_samples(samples, meta, "train")
    eval_s = _split_samples(samples, meta, "test")
    _, log_path, ckpt = train(train_s, model_cfg, cfg, args.out,
                              eval_samples=eval_s)
    print(f"checkpoint: {ckpt}")
    print(f"run log: {log_path}")
    return 0


def cmd_eval(args) -> int:
    samples, meta = dts_data.load_dataset(args.data)
    subset = _split_samples(samples, meta, args.split)
    num_classes = meta["phantom"]["num_classes"]
    if args.oracle:
        def predict(image, _it=iter(subset)):
            return one_hot(next(_it).label, num_classes)
        report = evaluate(predict, subset, num_classes)
    else:
        if not args.checkpoint:
            raise ConfigError("eval needs --checkpoint (or --oracle)")
        model, model_cfg, manifest = _load_model(args.checkpoint)
        steps = manifest["config"].get("train", {}).get("diffusion_steps", 1000)
        schedule = build_schedule(steps)
        report = evaluate_model(model, subset, schedule, num_classes,
                                steps=args.steps, seed=args.seed or 0,
                                ensemble=args.ensemble)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(report.to_json())
    print(f"mean foreground dice: {report.mean_dice:.4f}")
    print(f"report: {out}")
    return 0


def cmd_sample(args) -> int:
    model, model_cfg, manifest = _load_model(args.checkpoint)
    if args.image:
        image = dts_data.read_tensor(args.image).astype(np.float32)
    else:
        samples, meta = dts_data.load_dataset(args.data)
        image = samples[args.index].image
    steps = manifest["config"].get("train", {}).get("diffusion_steps", 1000)
    schedule = build_schedule(steps)
    with torch.no_grad():
        prob = sample_segmentation(model, torch.from_numpy(image), schedule,
                                   model_cfg.num_classes, steps=args.steps,
                                   ensemble=args.ensemble,
                                   seed=args.seed or 0)
    prob_np = prob.numpy()
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    dts_data.write_tensor(out.with_suffix(".dten"), prob_np)
    hard = prob_np.argmax(axis=0).astype(np.float64)
    dts_data.write_pgm(out.with_suffix(".pgm"),
                       hard / max(model_cfg.num_classes - 1, 1))
    print(f"soft label: {out.with_suffix('.dten')}")
    print(f"preview: {out.with_suffix('.pgm')}")
    return 0


def cmd_smooth(args) -> int:
    raw = read_config(args.config)
    section = _apply_overrides(raw.get("smoothing", {}), args,
                               {"k": "k", "alpha": "alpha", "tau": "tau"})
    cfg = dataclass_from(SmoothingConfig, section, "smoothing")
    samples, meta = dts_data.load_dataset(args.data)
    num_classes = meta["phantom"]["num_classes"]
    subset = _split_samples(samples, meta, args.split)
    geometry = dataset_geometry([class_centroids(s.label, num_classes)
                                 for s in subset])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, s in enumerate(subset):
        soft = smooth_labels(s.label, geometry, cfg)
        dts_data.write_tensor(out / f"{i:04d}.dten", soft)
    (out / "smoothing.json").write_text(json.dumps(
        {"smoothing": dataclasses.asdict(cfg), "num_classes": num_classes,
         "count": len(subset)}, indent=2))
    print(f"wrote {len(subset)} smoothed label tensors to {out}")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dts",
        description="Conditional diffusion segmentation on synthetic phantoms")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=True):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int, default=None)
        if data:
            p.add_argument("--data", required=True,
                           help="dataset directory from gen-data")

    p = sub.add_parser("gen-data", help="generate a phantom dataset")
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=None)
    p.add_argument("--size", type=int, default=None)
    p.add_argument("--classes", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--train-frac", dest="train_frac", type=float, default=None)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain", help="self-supervised encoder pretraining")
    common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="train", choices=["train", "test", "all"])
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--image-size", dest="image_size", type=int, default=None)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train", help="fine-tune the diffusion segmenter")
    common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--knls", type=_onoff, default=None,
                   help="label smoothing on|off")
    p.add_argument("--rba", type=_onoff, default=None,
                   help="boundary refinement on|off")
    p.add_argument("--augment", type=_onoff, default=None)
    p.add_argument("--cond-mode", dest="cond_mode", default=None,
                   choices=["scratch", "frozen", "trainable"])
    p.add_argument("--pretrained", default=None,
                   help="encoder checkpoint for frozen/trainable modes")
    p.add_argument("--eval-every", dest="eval_every", type=int, default=None)
    p.add_argument("--image-size", dest="image_size", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a dataset split")
    common(p)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--out", required=True, help="MetricsReport JSON path")
    p.add_argument("--split", default="test", choices=["train", "test", "all"])
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--ensemble", type=int, default=1)
    p.add_argument("--oracle", action="store_true",
                   help="score the ground-truth oracle predictor instead")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sample", help="sample a segmentation for one image")
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", default=None, help=".dten image tensor")
    p.add_argument("--data", default=None, help="dataset directory")
    p.add_argument("--index", type=int, default=0,
                   help="sample index when using --data")
    p.add_argument("--out", required=True, help="output prefix")
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--ensemble", type=int, default=1)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("smooth", help="export smoothed label tensors")
    common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="train", choices=["train", "test", "all"])
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--tau", type=float, default=None)
    p.set_defaults(func=cmd_smooth)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "command", None) == "sample":
        if not args.image and not args.data:
            print("error: sample needs --image or --data", file=sys.stderr)
            return 2
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
