"""``equiv-assembly`` command line.

    equiv-assembly generate|train|eval|check-equivariance --config <path> [--key value ...]

Every ``--key value`` pair overrides the matching config key; values are
parsed as JSON when possible (``--shapes '["box"]'``, ``--use_correlation false``).
Progress is logged as one JSON record per line on stdout.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import grad
from .config import TrainConfig, load_config, parse_value
from .correlation import AssemblyNet
from .data import generate_dataset, read_dataset, write_dataset
from .equivariance import check_equivariance
from .errors import AssemblyError, ConfigError
from .geometry import UNIFORM_MEAN_GEODESIC, geodesic
from .losses import pose_metrics
from .plots import plot_geodesic_histogram, plot_losses
from .train import evaluate, export_assemblies, json_logger, load_model, load_weights, predict, train

COMMANDS = ("generate", "train", "eval", "check-equivariance")


def parse_overrides(tokens: list[str]) -> dict:
    out = {}
    it = iter(tokens)
    for tok in it:
        if not tok.startswith("--"):
            raise ConfigError(f"expected --key, got {tok!r}")
        key = tok[2:].replace("-", "_")
        if "=" in key:
            key, value = key.split("=", 1)
        else:
            value = next(it, None)
            if value is None:
                raise ConfigError(f"missing value for --{key}")
        out[key] = parse_value(value)
    return out


def _dataset(path: str):
    if not Path(path).exists():
        raise ConfigError(f"dataset {path} does not exist; run `equiv-assembly generate` first")
    return read_dataset(path)[1]


def cmd_generate(cfg: TrainConfig, log) -> int:
    data_cfg = cfg.data_config()
    t0 = time.perf_counter()
    samples = generate_dataset(data_cfg)
    manifest = write_dataset(cfg.dataset, samples, data_cfg)
    counts = np.bincount([s.num_parts for s in samples]).tolist()
    log({
        "event": "generate",
        "path": cfg.dataset,
        "count": manifest["count"],
        "seed": data_cfg.seed,
        "parts_histogram": {str(k): c for k, c in enumerate(counts) if c},
        "seconds": time.perf_counter() - t0,
    })
    return 0


def cmd_train(cfg: TrainConfig, log) -> int:
    samples = _dataset(cfg.dataset)
    eval_samples = _dataset(cfg.eval_dataset) if cfg.eval_dataset else None
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=1))
    file_log = json_logger(path=out / "log.jsonl")

    def both(record):
        log(record)
        file_log(record)

    trainer, history = train(cfg, samples, both, eval_samples)
    if history:
        plot_losses(history, out / "losses.png")
    if eval_samples is not None:
        report, _ = evaluate(trainer.model, eval_samples, cfg.tau, cfg.batch_size)
        (out / "metrics.json").write_text(report.to_json())
        print(report.table())
    return 0


def cmd_eval(cfg: TrainConfig, log) -> int:
    checkpoint = cfg.checkpoint or str(Path(cfg.out_dir) / "last.eqas")
    model = load_model(cfg, checkpoint)
    samples = _dataset(cfg.eval_dataset or cfg.dataset)
    preds = predict(model, samples, cfg.batch_size, keep_points=cfg.export_dir is not None)
    report = pose_metrics(preds.R_pred, preds.R_gt, preds.T_pred, preds.T_gt, preds.chamfer, cfg.tau)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.json").write_text(report.to_json())
    plot_geodesic_histogram(geodesic(preds.R_pred, preds.R_gt), out / "geodesic_errors.png", UNIFORM_MEAN_GEODESIC)
    log({"event": "eval", "checkpoint": checkpoint, **json.loads(report.to_json())})
    if cfg.export_dir:
        paths = export_assemblies(preds, cfg.export_dir)
        log({"event": "export", "directory": cfg.export_dir, "files": len(paths)})
    print(report.table())
    return 0


def cmd_check_equivariance(cfg: TrainConfig, log) -> int:
    torch.manual_seed(cfg.seed)
    model = AssemblyNet(cfg.model_config())
    if cfg.checkpoint:
        load_weights(model, grad.load_checkpoint(cfg.checkpoint), "model.")
    t0 = time.perf_counter()
    report = check_equivariance(model, cfg.check_rotations, cfg.check_sets, cfg.check_tolerance, cfg.seed, dtype=cfg.check_dtype)
    for record in report.records():
        log(record)
    log({"event": "equivariance_summary", "passed": report.passed, "max_rel_error": report.max_error, "seconds": time.perf_counter() - t0})
    print(report.table())
    return 0 if report.passed else 1


HANDLERS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "eval": cmd_eval,
    "check-equivariance": cmd_check_equivariance,
}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="equiv-assembly", description=__doc__.split("\n\n")[0])
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", help="JSON file with TrainConfig keys")
    args, rest = parser.parse_known_args(argv)
    log = json_logger(stream=sys.stdout)
    try:
        cfg = load_config(args.config, parse_overrides(rest))
        return HANDLERS[args.command](cfg, log)
    except (AssemblyError, FileNotFoundError) as exc:
        log({"event": "error", "type": type(exc).__name__, "message": str(exc)})
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
