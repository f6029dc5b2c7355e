"""Training recipe: SGD + momentum, cosine annealing without restart, warm start."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .data import DatasetStats, ImageDataset, batch_iter
from .errors import ConfigError, DivergenceError, NonFiniteError, UsageError
from .models import ShakeNet
from .ops import softmax_cross_entropy
from .shake import TEST, TRAIN, RngStream, step_coefficients
from .tensor import ParamSet, Tensor, backward, no_grad

log = logging.getLogger(__name__)

METRICS_HEADER = ["epoch", "lr", "train_loss", "train_err", "test_err", "seconds"]
_PRECISION = {"single": np.float32, "double": np.float64}


@dataclass(frozen=True)
class WarmStart:
    lr: float
    epochs: int


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 128
    lr0: float = 0.2
    warm_start: WarmStart | None = None
    momentum: float = 0.9
    weight_decay: float = 1e-4
    seed: int = 0
    precision: str = "single"
    deterministic: bool = True
    eval_batch_size: int = 256

    def __post_init__(self):
        if isinstance(self.warm_start, dict):
            object.__setattr__(self, "warm_start", WarmStart(**self.warm_start))
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1 or self.eval_batch_size < 1:
            raise ConfigError("batch sizes must be >= 1")
        if not self.lr0 > 0:
            raise ConfigError("lr0 must be > 0")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")
        if self.precision not in _PRECISION:
            raise ConfigError(f"precision must be 'single' or 'double', got {self.precision!r}")
        ws = self.warm_start
        if ws is not None and (ws.epochs < 0 or ws.epochs >= self.epochs or ws.lr <= 0):
            raise ConfigError("warm_start needs lr > 0 and 0 <= epochs < total epochs")

    @property
    def dtype(self):
        return _PRECISION[self.precision]

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    train_err: float
    test_err: float
    seconds: float = field(default=0.0, compare=False)


def cosine_lr(t: float, total: float, lr0: float) -> float:
    """``0.5 * lr0 * (1 + cos(pi * t / total))`` for ``0 <= t <= total``."""
    if t < 0 or t > total:
        raise UsageError(f"schedule position {t} outside [0, {total}]")
    # t / total first: the midpoint phase 0.5 is exact, so cos(pi/2) rounds 1 + cos to 1
    return 0.5 * lr0 * (1.0 + math.cos(math.pi * (t / total)))


def lr_at_epoch(epoch: int, cfg: TrainConfig) -> float:
    ws = cfg.warm_start
    if ws is not None and ws.epochs > 0:
        if epoch < ws.epochs:
            return ws.lr
        return cosine_lr(epoch - ws.epochs, cfg.epochs - ws.epochs, cfg.lr0)
    return cosine_lr(epoch, cfg.epochs, cfg.lr0)


class SGD:
    """Heavy-ball SGD: ``v = m*v + g + wd*theta``; ``theta -= lr*v``.

    Weight decay only touches parameters flagged ``decay`` (conv/FC weights).
    """

    def __init__(self, params: ParamSet, momentum: float = 0.9, weight_decay: float = 1e-4):
        self.params = params
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity: dict[str, np.ndarray] = {}

    def step(self, lr: float) -> None:
        grads = self.params.grads()
        for name, g in grads.items():
            if not np.isfinite(g).all():
                raise NonFiniteError(f"non-finite gradient for {name}")
        for name, p in self.params.items():
            g = grads[name]
            if self.weight_decay and p.decay:
                g = g + self.weight_decay * p.data
            v = self.velocity.get(name)
            if v is None or self.momentum == 0:
                v = np.array(g, dtype=p.dtype, copy=True)
            else:
                v *= self.momentum
                v += g
            self.velocity[name] = v
            p.data -= (lr * v).astype(p.dtype, copy=False)
        self.params.zero_grad()


def top1_errors(logits: np.ndarray, labels: np.ndarray) -> int:
    return int((logits.argmax(axis=1) != labels).sum())


def evaluate(model, dataset: ImageDataset, stats: DatasetStats | None = None, batch_size: int = 256) -> dict:
    """Test-phase loss and top-1 error (%) over ``dataset``."""
    total_loss = 0.0
    wrong = 0
    n = len(dataset)
    dtype = getattr(model, "dtype", np.float64)
    with no_grad():
        for x, y in batch_iter(dataset, batch_size, shuffle=False, stats=stats, dtype=dtype):
            logits = model(x, TEST)
            logits = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
            total_loss += float(softmax_cross_entropy(Tensor(logits), y, reduction="sum").data)
            wrong += top1_errors(logits, y)
    return {"loss": total_loss / n, "error": 100.0 * wrong / n}


class Trainer:
    """Owns model, optimizer and coefficient stream for one training run."""

    COEFF_STREAM = 0xC0EF
    DATA_STREAM = 0xDA7A

    def __init__(
        self,
        model: ShakeNet,
        train_set: ImageDataset,
        test_set: ImageDataset | None,
        cfg: TrainConfig,
        augment: bool = True,
        stats: DatasetStats | None = None,
    ):
        self.model = model
        self.train_set = train_set
        self.test_set = test_set
        self.cfg = cfg
        self.augment = augment
        self.stats = stats if stats is not None else DatasetStats.compute(train_set)
        self.optimizer = SGD(model.params, cfg.momentum, cfg.weight_decay)
        seed = int(np.random.SeedSequence([cfg.seed, self.COEFF_STREAM]).generate_state(1, np.uint64)[0])
        self.coeff_rng = RngStream(seed)
        self.epoch = 0
        self.records: list[EpochRecord] = []

    def data_rng(self, epoch: int) -> np.random.Generator:
        return np.random.default_rng(np.random.SeedSequence([self.cfg.seed, self.DATA_STREAM, epoch]))

    def train_step(self, x: np.ndarray, y: np.ndarray, lr: float) -> tuple[float, int]:
        model = self.model
        coeffs = model.shake_coefficients()
        shake = model.spec.shake
        step_coefficients(coeffs, shake, self.coeff_rng, batch_size=len(y))
        logits = model(x, TRAIN)
        loss = softmax_cross_entropy(logits, y)
        step_coefficients(coeffs, shake, self.coeff_rng)
        backward(loss)
        self.optimizer.step(lr)
        return float(loss.data), top1_errors(logits.data, y)

    def run_epoch(self) -> EpochRecord:
        epoch = self.epoch
        lr = lr_at_epoch(epoch, self.cfg)
        start = time.perf_counter()
        rng = self.data_rng(epoch)
        loss_sum, wrong, seen = 0.0, 0, 0
        batches = batch_iter(
            self.train_set, self.cfg.batch_size, True, rng, self.augment, self.stats, self.model.dtype
        )
        for step, (x, y) in enumerate(batches):
            try:
                with np.errstate(over="ignore", invalid="ignore"):
                    loss, errs = self.train_step(x, y, lr)
            except NonFiniteError as exc:
                raise DivergenceError(epoch, step, str(exc)) from exc
            if not math.isfinite(loss):
                raise DivergenceError(epoch, step, f"loss is {loss}")
            loss_sum += loss * len(y)
            wrong += errs
            seen += len(y)
        test_err = float("nan")
        if self.test_set is not None and len(self.test_set):
            test_err = evaluate(self.model, self.test_set, self.stats, self.cfg.eval_batch_size)["error"]
        rec = EpochRecord(
            epoch=epoch,
            lr=lr,
            train_loss=loss_sum / seen,
            train_err=100.0 * wrong / seen,
            test_err=test_err,
            seconds=time.perf_counter() - start,
        )
        self.records.append(rec)
        self.epoch += 1
        log.info("epoch %d lr %.4f loss %.4f train_err %.2f test_err %.2f", epoch, lr, rec.train_loss, rec.train_err, test_err)
        return rec

    def fit(self, on_epoch: Callable[[EpochRecord], None] | None = None) -> list[EpochRecord]:
        while self.epoch < self.cfg.epochs:
            rec = self.run_epoch()
            if on_epoch is not None:
                on_epoch(rec)
        return self.records


def train(
    model: ShakeNet,
    train_set: ImageDataset,
    cfg: TrainConfig,
    test_set: ImageDataset | None = None,
    augment: bool = True,
) -> list[EpochRecord]:
    """Run the full schedule and return one record per epoch."""
    return Trainer(model, train_set, test_set, cfg, augment).fit()


def _fmt(v: float) -> str:
    return repr(float(v))


def write_metrics_csv(path, records: list[EpochRecord], deterministic: bool = True) -> None:
    """``epoch,lr,train_loss,train_err,test_err,seconds``; ``seconds`` is blank in deterministic mode."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for r in records:
            secs = "" if deterministic else _fmt(r.seconds)
            w.writerow([r.epoch, _fmt(r.lr), _fmt(r.train_loss), _fmt(r.train_err), _fmt(r.test_err), secs])


def write_timing_csv(path, records: list[EpochRecord]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["epoch", "seconds"])
        for r in records:
            w.writerow([r.epoch, f"{r.seconds:.3f}"])


def read_metrics_csv(path) -> list[EpochRecord]:
    out = []
    with open(Path(path), newline="") as f:
        for row in csv.DictReader(f):
            out.append(
                EpochRecord(
                    int(row["epoch"]),
                    float(row["lr"]),
                    float(row["train_loss"]),
                    float(row["train_err"]),
                    float(row["test_err"]),
                    float(row["seconds"]) if row["seconds"] else 0.0,
                )
            )
    return out
