"""Desk-scale regularization-direction experiment.

Trains 14 2x32d models on a CIFAR-10 training subset for each shake
configuration and seed, then compares the seed-averaged final training
error. Shake should raise training error: E-E-B <= S-E-I <= S-S-I.

    python -m shakeshake.experiments --cifar /path/to/cifar-10-batches-bin
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import find_cifar10, load_cifar10
from .errors import ConfigError
from .models import ModelSpec, build_model
from .shake import ShakeConfig
from .train import TrainConfig, Trainer

log = logging.getLogger(__name__)

CONFIGS = ("E-E-B", "S-E-I", "S-S-I")


@dataclass
class DirectionResult:
    configs: tuple[str, ...]
    final_train_err: dict[str, list[float]] = field(default_factory=dict)
    seconds: float = 0.0
    status: str = "complete"  # or "over_budget"
    projected_seconds: float | None = None

    def mean_err(self) -> dict[str, float]:
        return {c: float(np.mean(v)) for c, v in self.final_train_err.items() if v}

    @property
    def ordered(self) -> bool:
        if self.status != "complete":
            return False
        m = self.mean_err()
        vals = [m[c] for c in self.configs]
        return all(a <= b for a, b in zip(vals, vals[1:]))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mean_train_err"] = self.mean_err()
        d["ordered"] = self.ordered
        return d


def regularization_direction(
    cifar_root=None,
    subset: int = 4000,
    epochs: int = 30,
    seeds=(0, 1, 2),
    depth: int = 14,
    width: int = 32,
    configs=CONFIGS,
    batch_size: int = 128,
    lr0: float = 0.2,
    budget_seconds: float | None = 7200.0,
    test_subset: int | None = 1000,
) -> DirectionResult:
    """Train every (config, seed) pair and collect final training errors.

    After the first epoch the total runtime is projected; when it exceeds
    ``budget_seconds`` the experiment stops with status ``"over_budget"``.
    """
    root = find_cifar10(cifar_root)
    if root is None:
        raise ConfigError(
            "CIFAR-10 binaries not found; pass the directory holding data_batch_1.bin "
            "or set SHAKESHAKE_CIFAR10_DIR"
        )
    train_full, test_full = load_cifar10(root)
    train_set = train_full.subset(subset)
    test_set = test_full.subset(test_subset)
    result = DirectionResult(tuple(configs))
    runs = len(configs) * len(seeds)
    start = time.perf_counter()
    for code in configs:
        errs = result.final_train_err.setdefault(code, [])
        for seed in seeds:
            spec = ModelSpec("shake_resnet", depth, width, shake=ShakeConfig.from_code(code))
            cfg = TrainConfig(epochs=epochs, batch_size=batch_size, lr0=lr0, seed=seed)
            trainer = Trainer(build_model(spec, seed=seed), train_set, test_set, cfg)
            while trainer.epoch < epochs:
                rec = trainer.run_epoch()
                if budget_seconds is not None and result.projected_seconds is None:
                    # epoch time includes one test evaluation, so this is a fair projection
                    result.projected_seconds = rec.seconds * epochs * runs
                    if result.projected_seconds > budget_seconds:
                        result.status = "over_budget"
                        result.seconds = time.perf_counter() - start
                        return result
            errs.append(trainer.records[-1].train_err)
            log.info("%s seed %d: final train error %.2f%%", code, seed, errs[-1])
    result.seconds = time.perf_counter() - start
    return result


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description="seed-averaged training-error ordering of shake configurations")
    p.add_argument("--cifar", help="CIFAR-10 binary directory (default: $SHAKESHAKE_CIFAR10_DIR)")
    p.add_argument("--subset", type=int, default=4000)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--budget", type=float, default=7200.0, help="seconds; 0 disables the projection guard")
    args = p.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    try:
        res = regularization_direction(
            args.cifar, args.subset, args.epochs, tuple(args.seeds), budget_seconds=args.budget or None
        )
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(json.dumps(res.to_dict(), indent=2))
    return 0 if res.ordered else 3


if __name__ == "__main__":
    sys.exit(main())
