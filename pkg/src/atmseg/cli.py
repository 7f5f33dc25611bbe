"""Command-line entry points.

Subcommands: gen-data, train, eval, infer, cost, cl-run.  Global flags
--config/--seed/--out apply to every subcommand; config files are strict
key=value (unknown keys fail).
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from atmseg import costmodel
from atmseg.checkpoint import assign_parameters, load_checkpoint
from atmseg.config import ConfigError, RunConfig, load_config
from atmseg.data import (
    DatasetSpec, generate_dataset, image_to_input, load_split, read_ppm,
    write_pgm,
)
from atmseg.model import build_model
from atmseg.tensor import ContractViolation


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="atmseg",
        description="attention-to-mask segmentation toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--seed", type=int, help="override config seed")
        p.add_argument("--out", help="output directory")
        return p

    common(sub.add_parser("gen-data", help="write a synthetic dataset"))
    common(sub.add_parser("train", help="train a model"))
    common(sub.add_parser("eval", help="evaluate a checkpoint"))
    p = common(sub.add_parser("infer", help="emit P5 label maps for inputs"))
    p.add_argument("inputs", nargs="*", help="P6 images (overrides config)")
    p = common(sub.add_parser("cost", help="analytic compute-cost reports"))
    p.add_argument("--preset", action="append", default=[],
                   help="preset name (repeatable)")
    p.add_argument("--list", action="store_true", help="list preset names")
    p.add_argument("--json", action="store_true", help="brace-delimited output")
    common(sub.add_parser("cl-run", help="multi-task continual schedule"))
    return parser


def _load(args) -> RunConfig:
    cfg = RunConfig()
    if args.config:
        cfg = load_config(args.config, cfg)
    if args.seed is not None:
        cfg.values["seed"] = args.seed
    if args.out:
        cfg.values["out"] = args.out
    return cfg


def _cmd_gen_data(cfg: RunConfig) -> int:
    size = cfg["data.image_size"]
    spec = DatasetSpec(
        seed=cfg["data.seed"], image_hw=(size, size),
        n_classes=cfg["data.classes"],
        shapes_min=cfg["data.shapes_min"], shapes_max=cfg["data.shapes_max"],
        size_min=cfg["data.size_min"], size_max=cfg["data.size_max"],
        noise_std=cfg["data.noise_std"],
        train_count=cfg["data.train_count"], val_count=cfg["data.val_count"],
    )
    root = generate_dataset(spec, cfg["out"])
    print(f"dataset written to {root}")
    return 0


def _cmd_train(cfg: RunConfig) -> int:
    from atmseg.train import run_training

    _, report, _ = run_training(cfg, cfg["out"])
    print(f"final miou={report['miou']:.6f}")
    print(f"checkpoint: {os.path.join(cfg['out'], 'model.ckpt')}")
    return 0


def _restore_model(cfg: RunConfig, ckpt_path: str):
    table, _, _ = load_checkpoint(ckpt_path)
    model = build_model(cfg.model_config(), cfg["seed"], cfg.loss_weights())
    assign_parameters(model, table)
    return model


def _cmd_eval(cfg: RunConfig) -> int:
    from atmseg.train import evaluate

    ckpt = cfg["eval.checkpoint"]
    if not ckpt:
        raise ConfigError("eval.checkpoint must point at a checkpoint file")
    model = _restore_model(cfg, ckpt)
    samples = load_split(cfg["data.dir"] or os.path.join(cfg["out"], "dataset"),
                         "val", cfg["data.classes"])
    report = evaluate(model, samples)
    for c, v in enumerate(report["iou"]):
        print(f"class {c}\tiou={v:.6f}")
    print(f"miou={report['miou']:.6f}")
    return 0


def _cmd_infer(cfg: RunConfig, inputs) -> int:
    ckpt = cfg["infer.checkpoint"]
    if not ckpt:
        raise ConfigError("infer.checkpoint must point at a checkpoint file")
    paths = list(inputs) or [
        p for p in cfg["infer.inputs"].split(",") if p.strip()
    ]
    if not paths:
        raise ConfigError("no input images given (args or infer.inputs)")
    model = _restore_model(cfg, ckpt)
    os.makedirs(cfg["out"], exist_ok=True)
    for path in paths:
        image = read_ppm(path)
        pred = model.predict(image_to_input(image))
        stem = os.path.splitext(os.path.basename(path))[0]
        out_path = os.path.join(cfg["out"], f"{stem}_labels.pgm")
        write_pgm(out_path, pred.astype(np.uint8))
        print(f"{path} -> {out_path}")
    return 0


def _cmd_cost(cfg: RunConfig, args) -> int:
    if args.list:
        for name in sorted(costmodel.PRESETS):
            print(name)
        return 0
    names = list(args.preset)
    if not names and cfg["cost.presets"]:
        names = [n.strip() for n in cfg["cost.presets"].split(",") if n.strip()]
    if not names:
        raise ConfigError("cost: give --preset NAME (repeatable) or cost.presets")
    presets = [costmodel.preset(n) for n in names]
    sys.stdout.write(costmodel.compare_report(presets, as_json=args.json))
    return 0


def _cmd_cl_run(cfg: RunConfig) -> int:
    from atmseg.continual import format_forgetting
    from atmseg.train import cl_run

    report = cl_run(cfg, cfg["out"])
    sys.stdout.write(format_forgetting(report["forgetting"]))
    print(f"raw_output_drift_samples={report['raw_output_drift_samples']}")
    return 0


def cli_dispatch(argv) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 2
    try:
        cfg = _load(args)
        if args.command == "gen-data":
            return _cmd_gen_data(cfg)
        if args.command == "train":
            return _cmd_train(cfg)
        if args.command == "eval":
            return _cmd_eval(cfg)
        if args.command == "infer":
            return _cmd_infer(cfg, args.inputs)
        if args.command == "cost":
            return _cmd_cost(cfg, args)
        if args.command == "cl-run":
            return _cmd_cl_run(cfg)
        parser.error(f"unknown command {args.command!r}")
    except (ConfigError, ContractViolation, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(cli_dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
