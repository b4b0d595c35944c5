"""Command-line entry point: estimate, train, eval, denoise, synth."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .data import load_shape_list, read_normals, read_xyz, save_shape, synth_shape, write_normals, write_xyz
from .errors import ConfigurationError, GraphFitError
from .evaluation import CATEGORIES, DenoiseConfig, compare_methods, denoise, estimate_cloud_normals
from .geometry import PointCloud
from .network import GraphFitModel, ModelConfig
from .training import (LossWeights, PatchDataset, TrainConfig, epoch_rng_state, load_checkpoint,
                       save_checkpoint, train, validate_dataset)

log = logging.getLogger("graphfit")


def _print_config(command: str, config: dict) -> None:
    print(json.dumps({"command": command, **config}, indent=2, sort_keys=True, default=str))


def _parse_params(items) -> dict:
    params = {}
    for item in items or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigurationError(f"--param expects key=value, got {item!r}")
        params[key] = float(value)
    return params


def cmd_estimate(args) -> int:
    cloud = PointCloud(read_xyz(args.input))
    config = {"input": args.input, "output": args.output, "method": args.method,
              "k": args.k, "jet_order": args.jet_order, "checkpoint": args.checkpoint}
    if args.method == "model":
        if not args.checkpoint:
            raise ConfigurationError("--method model requires --checkpoint")
        if not Path(args.checkpoint).exists():
            raise ConfigurationError(f"checkpoint {args.checkpoint} does not exist")
        method = load_checkpoint(args.checkpoint).build_model()
        config["k"] = method.config.patch_size
        config["jet_order"] = method.config.jet_order
    else:
        method = args.method
    _print_config("estimate", config)
    normals = estimate_cloud_normals(method, cloud, np.arange(len(cloud)), args.k, args.jet_order)
    write_normals(args.output, normals)
    return 0


def _read_json(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}: invalid JSON ({exc})") from exc


def cmd_train(args) -> int:
    raw = _read_json(args.config) if args.config else {}
    unknown = set(raw) - {"model", "train", "loss", "seed"}
    if unknown:
        raise ConfigurationError(f"unknown config sections: {sorted(unknown)}")
    model_config = ModelConfig.from_dict(raw.get("model", {}))
    train_config = TrainConfig.from_dict(raw.get("train", {}))
    weights = LossWeights(**raw.get("loss", {}))
    shapes = load_shape_list(args.shapes)
    validate_dataset(shapes, model_config.patch_size)
    start, optimizer = 0, None
    if args.resume:
        ckpt = load_checkpoint(args.resume)
        model_config = ckpt.model_config
        model, optimizer, start = ckpt.build_model(), ckpt.optimizer, ckpt.epoch
    else:
        model = GraphFitModel(model_config, seed=int(raw.get("seed", train_config.seed)))
    _print_config("train", {"shapes": args.shapes, "checkpoint": args.output, "start_epoch": start,
                            "model": model_config.to_dict(), "train": train_config.__dict__,
                            "loss": weights.__dict__})
    dataset = PatchDataset(shapes, model_config.patch_size, train_config.per_shape)
    result = train(model, dataset, train_config, weights, optimizer=optimizer, start_epoch=start,
                   on_epoch=lambda e, loss: print(f"epoch {e} loss {loss:.6f}", flush=True))
    save_checkpoint(args.output, result.model, result.optimizer, result.epoch, train_config,
                    epoch_rng_state(train_config.seed, result.epoch))
    return 0


def cmd_eval(args) -> int:
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    augmentations = args.augmentations.split(",") if args.augmentations else None
    _print_config("eval", {"shapes": args.shapes, "methods": methods, "report": args.report, "k": args.k,
                           "jet_order": args.jet_order, "queries": args.queries, "seed": args.seed,
                           "augmentations": augmentations or [c[0] for c in CATEGORIES]})
    shapes = load_shape_list(args.shapes)
    comparison = compare_methods(shapes, methods, augmentations, args.k, args.jet_order,
                                 args.queries, args.seed)
    comparison.write(args.report, args.records)
    print(comparison.table())
    return 0


def cmd_denoise(args) -> int:
    cfg = DenoiseConfig(args.gamma, args.iters, args.k)
    _print_config("denoise", {"input": args.input, "normals": args.normals, "output": args.output,
                              "gamma": cfg.gamma, "iterations": cfg.iterations, "k": cfg.k})
    cloud = PointCloud(read_xyz(args.input), read_normals(args.normals))
    write_xyz(args.output, denoise(cloud, cfg).points)
    return 0


def cmd_synth(args) -> int:
    params = _parse_params(args.param)
    output = Path(args.output)
    _print_config("synth", {"kind": args.kind, "count": args.count, "seed": args.seed,
                            "params": params, "output": str(output)})
    shape = synth_shape(args.kind, args.count, params, args.seed, name=output.name)
    save_shape(output.parent, shape)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="graphfit", description="Point-cloud normal estimation.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("estimate", help="estimate normals for a .xyz cloud")
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--method", choices=("pca", "jet", "model"), default="jet")
    p.add_argument("--k", type=int, default=256)
    p.add_argument("--jet-order", type=int, default=3)
    p.add_argument("--checkpoint")
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("train", help="train a model on a shape list")
    p.add_argument("shapes")
    p.add_argument("--config", help="JSON with optional model/train/loss sections")
    p.add_argument("--output", "-o", required=True, help="checkpoint path")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="compare methods on a shape list")
    p.add_argument("shapes")
    p.add_argument("--methods", default="pca,jet", help="comma list: pca, jet, checkpoint paths")
    p.add_argument("--report", required=True)
    p.add_argument("--records", help="line-delimited JSON output (default: REPORT.jsonl)")
    p.add_argument("--augmentations", help="comma list of categories (default: all)")
    p.add_argument("--k", type=int, default=256)
    p.add_argument("--jet-order", type=int, default=3)
    p.add_argument("--queries", type=int, help="max query points per shape")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("denoise", help="normal-guided point denoising")
    p.add_argument("input")
    p.add_argument("normals")
    p.add_argument("output")
    p.add_argument("--gamma", type=float, default=0.05)
    p.add_argument("--iters", type=int, default=10)
    p.add_argument("--k", type=int, default=8)
    p.set_defaults(func=cmd_denoise)

    p = sub.add_parser("synth", help="sample an analytic shape")
    p.add_argument("kind", choices=("plane", "sphere", "quadric", "cube"))
    p.add_argument("count", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--param", action="append", help="shape parameter key=value (repeatable)")
    p.add_argument("--output", "-o", required=True, help="output path without extension")
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (GraphFitError, ValueError, OSError) as exc:
        print(f"graphfit {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
