"""Command-line entry point: ``graspvq <command> [--config FILE] [--seed N] [--out DIR]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import __version__
from .dataset import load_dataset, split, synth_generate, write_synthetic
from .pipeline import (ExperimentConfig, evaluate, load_grasp_model, predict, records_to_csv,
                       sweep, train_baseline, train_grasp, train_vqvae)
from .plotting import plot_losses

log = logging.getLogger("graspvq")


def _config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.from_file(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = replace(cfg, seeds=[args.seed])
    return cfg


def _write_run(out: Path, args, cfg: ExperimentConfig, extra: dict | None = None):
    out.mkdir(parents=True, exist_ok=True)
    record = {"command": args.command, "version": __version__, "seed": cfg.seeds[0],
              "config": cfg.to_dict(),
              "args": {k: v for k, v in vars(args).items() if k not in ("func",)}}
    if extra:
        record.update(extra)
    (out / "run.json").write_text(json.dumps(record, indent=2, default=str))


def _split(cfg: ExperimentConfig):
    samples = load_dataset(cfg.dataset)
    return split(samples, cfg.test_fraction, cfg.labelled_ratio, cfg.seeds[0])


def cmd_synth_data(args, cfg):
    ds = dict(cfg.dataset)
    n = args.n or ds.get("n", 300)
    size = args.image_size or ds.get("image_size", 64)
    seed = cfg.seeds[0] if args.seed is not None else ds.get("seed", 0)
    write_synthetic(args.out, synth_generate(n, size, seed))
    _write_run(args.out, args, cfg, {"samples": n, "image_size": size, "generator_seed": seed})
    print(f"wrote {n} samples to {args.out}")


def cmd_train_vqvae(args, cfg):
    sp = _split(cfg)
    _, history = train_vqvae(sp, cfg, cfg.seeds[0], args.out / "vqvae")
    plot_losses({k: history[k] for k in ("recon", "codebook", "commitment", "total")},
                args.out / "vqvae_loss.png", "VQ-VAE training")
    (args.out / "history.json").write_text(json.dumps(history, indent=2))
    _write_run(args.out, args, cfg)
    print("epoch,recon,codebook,commitment,total,perplexity")
    for i, row in enumerate(zip(*(history[k] for k in
                                  ("recon", "codebook", "commitment", "total", "perplexity")))):
        print(f"{i}," + ",".join(f"{v:.6f}" for v in row))


def _train_head(args, cfg, method):
    sp = _split(cfg)
    seed = cfg.seeds[0]
    if method == "proposed":
        if not args.vqvae:
            raise SystemExit("train-grasp needs --vqvae <checkpoint dir>")
        model, curve = train_grasp(sp, args.vqvae, cfg, seed, args.out / "proposed")
    else:
        model, curve = train_baseline(sp, cfg, seed, args.out / "baseline")
    plot_losses({"grasp": curve}, args.out / f"{method}_loss.png", f"{method} training")
    rec = evaluate(model, sp.test, cfg.width_scale, method=method, labelled_ratio=cfg.labelled_ratio,
                   seed=seed, decode_sigma=cfg.decode_sigma, angle_threshold=cfg.angle_threshold)
    csv_text = records_to_csv([rec])
    (args.out / "metrics.csv").write_text(csv_text)
    _write_run(args.out, args, cfg, {"loss_curve": curve})
    sys.stdout.write(csv_text)


def cmd_train_grasp(args, cfg):
    _train_head(args, cfg, "proposed")


def cmd_train_baseline(args, cfg):
    _train_head(args, cfg, "baseline")


def cmd_evaluate(args, cfg):
    model = load_grasp_model(args.checkpoint)
    sp = _split(cfg)
    method = "proposed" if hasattr(model, "head") else "baseline"
    rec = evaluate(model, sp.test, cfg.width_scale, method=method,
                   labelled_ratio=cfg.labelled_ratio, seed=cfg.seeds[0],
                   decode_sigma=cfg.decode_sigma, angle_threshold=cfg.angle_threshold)
    csv_text = records_to_csv([rec])
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "metrics.csv").write_text(csv_text)
    _write_run(args.out, args, cfg, {"successes": rec.successes, "n_test": rec.n_test})
    sys.stdout.write(csv_text)


def cmd_predict(args, cfg):
    model = load_grasp_model(args.checkpoint)
    grasp = predict(model, args.image, args.out, cfg.width_scale, cfg.decode_sigma)
    _write_run(args.out, args, cfg)
    print(json.dumps(grasp.as_dict()))


def cmd_sweep(args, cfg):
    records = sweep(cfg, args.out)
    _write_run(args.out, args, cfg)
    sys.stdout.write(records_to_csv(records))


COMMANDS = {
    "train-vqvae": (cmd_train_vqvae, "fit the VQ-VAE on all training images"),
    "train-grasp": (cmd_train_grasp, "fit the grasp head on top of a frozen VQ-VAE"),
    "train-baseline": (cmd_train_baseline, "fit the supervised-only baseline"),
    "evaluate": (cmd_evaluate, "score a grasp checkpoint on the test split"),
    "predict": (cmd_predict, "decode and render the grasp for one image"),
    "sweep": (cmd_sweep, "labelled-ratio sweep over seeds and methods"),
    "synth-data": (cmd_synth_data, "write a synthetic bar dataset to disk"),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON or YAML experiment config")
    common.add_argument("--seed", type=int, help="override the config's seed list")
    common.add_argument("--out", type=Path, default=Path("runs/latest"), help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="graspvq", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (func, help_) in COMMANDS.items():
        p = sub.add_parser(name, parents=[common], help=help_)
        p.set_defaults(func=func)
        if name == "train-grasp":
            p.add_argument("--vqvae", type=Path, help="VQ-VAE checkpoint directory")
        if name in ("evaluate", "predict"):
            p.add_argument("--checkpoint", type=Path, required=True)
        if name == "predict":
            p.add_argument("--image", type=Path, required=True)
        if name == "synth-data":
            p.add_argument("--n", type=int)
            p.add_argument("--image-size", type=int)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        args.func(args, cfg)
    except (ValueError, RuntimeError, OSError) as exc:
        print(f"graspvq {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
