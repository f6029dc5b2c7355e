"""``shakeshake`` command: train, eval, analyze, verify.

Exit codes: 0 ok, 1 usage/config error, 2 divergence, 3 verification failure.
``$SHAKESHAKE_OUTPUT_DIR`` overrides the output directory of every command.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import verify
from .analysis import branch_correlation
from .checkpoint import load_model, save_training
from .config import DataSection, load_datasets, load_run_config
from .data import DatasetStats, ImageDataset, find_cifar10, read_cifar10_bin
from .errors import ConfigError, DivergenceError, FormatError, ShakeError
from .models import build_model
from .train import Trainer, evaluate, write_metrics_csv, write_timing_csv

EXIT_OK, EXIT_USAGE, EXIT_DIVERGED, EXIT_VERIFY = 0, 1, 2, 3
OUTPUT_ENV = "SHAKESHAKE_OUTPUT_DIR"

log = logging.getLogger("shakeshake")


def _output_dir(default) -> Path:
    out = Path(os.environ.get(OUTPUT_ENV) or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_train(args) -> int:
    cfg = load_run_config(args.config)
    out = _output_dir(cfg.output_dir)
    resolved = cfg.resolved()
    (out / "resolved_config.json").write_text(json.dumps(resolved, indent=2, sort_keys=True) + "\n")

    tcfg = cfg.train_config()
    train_set, test_set = load_datasets(cfg.data, cfg.model.num_classes)
    model = build_model(cfg.model_spec(), seed=tcfg.seed, dtype=tcfg.dtype)
    trainer = Trainer(model, train_set, test_set, tcfg, augment=cfg.data.augment)

    def flush():
        write_metrics_csv(out / "metrics.csv", trainer.records, tcfg.deterministic)
        write_timing_csv(out / "timing.csv", trainer.records)

    try:
        trainer.fit(on_epoch=lambda rec: flush())
    except DivergenceError as exc:
        flush()
        report = {"epoch": exc.epoch, "step": exc.step, "reason": exc.reason}
        (out / "divergence.json").write_text(json.dumps(report, indent=2) + "\n")
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    save_training(out / "final.ckpt", trainer, {"data": cfg.data.model_dump(mode="json")})
    last = trainer.records[-1]
    print(f"done: {len(trainer.records)} epochs, train_err {last.train_err:.2f}%, test_err {last.test_err:.2f}%")
    return EXIT_OK


def _eval_data(spec: str, meta: dict) -> ImageDataset:
    if spec == "synthetic":
        if "data" not in meta:
            raise ConfigError("checkpoint has no recorded data section; pass a CIFAR-10 path instead")
        data = DataSection(**meta["data"])
        if data.source != "synthetic":
            raise ConfigError("checkpoint was not trained on synthetic data")
        return load_datasets(data, int(meta["model"]["num_classes"]))[1]
    path = Path(spec)
    if path.is_file():
        return read_cifar10_bin(path)
    root = find_cifar10(path)
    if root is None:
        raise ConfigError(f"--data: {spec} is neither a CIFAR-10 .bin file nor a CIFAR-10 directory")
    return read_cifar10_bin(root / "test_batch.bin")


def _stats(meta: dict) -> DatasetStats | None:
    return DatasetStats.from_dict(meta["stats"]) if "stats" in meta else None


def cmd_eval(args) -> int:
    model, meta = load_model(args.ckpt)
    dataset = _eval_data(args.data, meta)
    result = evaluate(model, dataset, _stats(meta), args.batch_size)
    result["n"] = len(dataset)
    text = json.dumps(result, sort_keys=True)
    print(text)
    out = _output_dir(args.out or Path(args.ckpt).parent)
    (out / "eval.json").write_text(text + "\n")
    return EXIT_OK


def cmd_analyze(args) -> int:
    model, meta = load_model(args.ckpt)
    dataset = _eval_data(args.data, meta)
    report = branch_correlation(
        model, dataset, _stats(meta), args.batch_size, alignment=args.alignment, model_id=Path(args.ckpt).stem
    )
    out = _output_dir(args.out or Path(args.ckpt).parent)
    report.write_csv(out / "correlation.csv")
    if args.alignment:
        report.write_alignment_csv(out / "alignment.csv")
    for i, c in enumerate(report.correlations):
        print(f"block {i}: " + ("undefined (zero variance)" if c is None else f"{c:.6f}"))
    return EXIT_OK


def cmd_verify(args) -> int:
    results = verify.run_checks()
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_VERIFY if failed else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="shakeshake", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model from a JSON run config")
    t.add_argument("--config", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="test-phase evaluation of a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True, help="CIFAR-10 .bin file or directory, or 'synthetic'")
    e.add_argument("--out")
    e.add_argument("--batch-size", type=int, default=256)
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("analyze", help="branch correlation of a checkpoint")
    a.add_argument("--ckpt", required=True)
    a.add_argument("--data", required=True, help="CIFAR-10 .bin file or directory, or 'synthetic'")
    a.add_argument("--alignment", action="store_true", help="also write the per-block 3x3 layer matrix")
    a.add_argument("--out")
    a.add_argument("--batch-size", type=int, default=64)
    a.set_defaults(func=cmd_analyze)

    v = sub.add_parser("verify", help="gradient checks, rule grids and parameter counts")
    v.set_defaults(func=cmd_verify)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ConfigError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ShakeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
