"""Correlation between the two residual branches of every block.

For each block the input activation is pushed through both branches in test
mode, each output is scaled by 0.5, and every corresponding element pair is
streamed into one :class:`PairCovAccumulator`. Batches are folded in with
Chan's pairwise merge, so nothing larger than one mini-batch is materialized.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .data import DatasetStats, ImageDataset, batch_iter
from .errors import ConfigError, UndefinedCorrelationError
from .models import ShakeBlock, ShakeNet
from .shake import TEST
from .tensor import no_grad

ALIGNMENT_LAYERS = 3


@dataclass
class PairCovAccumulator:
    """Running count, means, centred second moments and cross moment."""

    n: int = 0
    mean_x: float = 0.0
    mean_y: float = 0.0
    m_x: float = 0.0
    m_y: float = 0.0
    c_xy: float = 0.0

    def update(self, x: float, y: float) -> "PairCovAccumulator":
        self.n += 1
        dx = x - self.mean_x
        self.mean_x += dx / self.n
        dy = y - self.mean_y
        self.mean_y += dy / self.n
        self.m_x += dx * (x - self.mean_x)
        self.m_y += dy * (y - self.mean_y)
        self.c_xy += dx * (y - self.mean_y)
        return self

    def update_batch(self, xs, ys) -> "PairCovAccumulator":
        same = ys is xs
        xs = np.asarray(xs, dtype=np.float64).ravel()
        ys = xs if same else np.asarray(ys, dtype=np.float64).ravel()
        if xs.shape != ys.shape:
            raise ValueError(f"paired streams differ in length: {xs.size} vs {ys.size}")
        if xs.size == 0:
            return self
        mx = xs.mean()
        dx = xs - mx
        mxx = float(dx @ dx)
        if same:
            my, myy, cxy = mx, mxx, mxx
        else:
            my = ys.mean()
            dy = ys - my
            myy = float(dy @ dy)
            cxy = float(dx @ dy)
        return self.merge(PairCovAccumulator(xs.size, float(mx), float(my), mxx, myy, cxy))

    def merge(self, other: "PairCovAccumulator") -> "PairCovAccumulator":
        if other.n == 0:
            return self
        if self.n == 0:
            self.n, self.mean_x, self.mean_y = other.n, other.mean_x, other.mean_y
            self.m_x, self.m_y, self.c_xy = other.m_x, other.m_y, other.c_xy
            return self
        n = self.n + other.n
        dx = other.mean_x - self.mean_x
        dy = other.mean_y - self.mean_y
        w = self.n * other.n / n
        self.mean_x += dx * other.n / n
        self.mean_y += dy * other.n / n
        self.m_x += other.m_x + dx * dx * w
        self.m_y += other.m_y + dy * dy * w
        self.c_xy += other.c_xy + dx * dy * w
        self.n = n
        return self

    def copy(self) -> "PairCovAccumulator":
        return PairCovAccumulator(self.n, self.mean_x, self.mean_y, self.m_x, self.m_y, self.c_xy)

    def covariance(self, ddof: int = 1) -> float:
        return self.c_xy / (self.n - ddof)

    def variances(self, ddof: int = 1) -> tuple[float, float]:
        return self.m_x / (self.n - ddof), self.m_y / (self.n - ddof)

    def correlation(self) -> float:
        return finalize_correlation(self)


def cov_update(acc: PairCovAccumulator, x: float, y: float) -> PairCovAccumulator:
    return acc.update(x, y)


def finalize_correlation(acc: PairCovAccumulator) -> float:
    if acc.n < 2 or acc.m_x <= 0 or acc.m_y <= 0:
        raise UndefinedCorrelationError(
            f"correlation undefined (n={acc.n}, Mx={acc.m_x}, My={acc.m_y})"
        )
    return acc.c_xy / math.sqrt(acc.m_x * acc.m_y)


@dataclass
class CorrelationReport:
    model_id: str
    n_images: int
    correlations: list[float | None]
    alignment: list[np.ndarray] | None = field(default=None)

    @property
    def undefined(self) -> list[int]:
        return [i for i, c in enumerate(self.correlations) if c is None]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["block", "correlation"])
            for i, c in enumerate(self.correlations):
                w.writerow([i, "" if c is None else repr(c)])

    def write_alignment_csv(self, path) -> None:
        if self.alignment is None:
            raise ValueError("report has no alignment matrices")
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["block", "m", "n", "correlation"])
            for i, mat in enumerate(self.alignment):
                for m in range(ALIGNMENT_LAYERS):
                    for n in range(ALIGNMENT_LAYERS):
                        v = mat[m, n]
                        w.writerow([i, m + 1, n + 1, "" if np.isnan(v) else repr(float(v))])


def _safe_corr(acc: PairCovAccumulator) -> float | None:
    try:
        return finalize_correlation(acc)
    except UndefinedCorrelationError:
        return None


def _branch_outputs(block: ShakeBlock, x, capture: bool):
    """Both branch outputs (times 0.5) and, optionally, per-layer activations."""
    cap1 = [] if capture else None
    y1 = block.branch1(x, TEST, cap1)
    if block.branch2 is block.branch1:
        half = y1.data * 0.5
        return half, half, cap1, cap1
    cap2 = [] if capture else None
    y2 = block.branch2(x, TEST, cap2)
    return y1.data * 0.5, y2.data * 0.5, cap1, cap2


def _check_alignment_depth(model: ShakeNet) -> None:
    for i, b in enumerate(model.blocks):
        if len(b.branch1.layers) - 1 < ALIGNMENT_LAYERS:
            raise ConfigError(
                f"block {i} has fewer than {ALIGNMENT_LAYERS} layers after the input ReLU; "
                "layer-wise alignment is not defined for this family"
            )


def _accumulate(model: ShakeNet, dataset: ImageDataset, stats, batch_size: int, alignment: bool):
    nb = len(model.blocks)
    accs = [PairCovAccumulator() for _ in range(nb)]
    align = [[[PairCovAccumulator() for _ in range(3)] for _ in range(3)] for _ in range(nb)] if alignment else None

    def probe(i, block, x):
        y1, y2, cap1, cap2 = _branch_outputs(block, x, alignment)
        accs[i].update_batch(y1, y2)
        if alignment:
            # layer 0 is the ReLU on the shared input, identical in both branches
            l1 = [a.data for a in cap1[1 : 1 + ALIGNMENT_LAYERS]]
            l2 = l1 if cap2 is cap1 else [a.data for a in cap2[1 : 1 + ALIGNMENT_LAYERS]]
            for m in range(ALIGNMENT_LAYERS):
                for n in range(ALIGNMENT_LAYERS):
                    ys = l1[m] if (cap2 is cap1 and m == n) else l2[n]
                    align[i][m][n].update_batch(l1[m], ys)

    with no_grad():
        for x, _ in batch_iter(dataset, batch_size, shuffle=False, stats=stats, dtype=model.dtype):
            model.forward(x, TEST, probe=probe)
    return accs, align


def branch_correlation(
    model: ShakeNet,
    dataset: ImageDataset,
    stats: DatasetStats | None = None,
    batch_size: int = 64,
    alignment: bool = False,
    model_id: str = "",
) -> CorrelationReport:
    """Per-block correlation of the two branch outputs over ``dataset``.

    Blocks whose branch output has zero variance get ``None``. With
    ``alignment=True`` the report also carries the 3x3 layer matrices
    (see :func:`layerwise_alignment`).
    """
    if alignment:
        _check_alignment_depth(model)
    accs, align = _accumulate(model, dataset, stats, batch_size, alignment)
    report = CorrelationReport(model_id or model.spec.family, len(dataset), [_safe_corr(a) for a in accs])
    if alignment:
        report.alignment = [
            np.array([[_nan_corr(align[i][m][n]) for n in range(3)] for m in range(3)]) for i in range(len(accs))
        ]
    return report


def _nan_corr(acc: PairCovAccumulator) -> float:
    c = _safe_corr(acc)
    return float("nan") if c is None else c


def layerwise_alignment(
    model: ShakeNet, dataset: ImageDataset, stats: DatasetStats | None = None, batch_size: int = 64
) -> list[np.ndarray]:
    """Per-block 3x3 matrix; entry (m, n) correlates layer m of branch 1 with layer n of branch 2.

    Layers are the outputs of the first three components after the input
    ReLU (which both branches share): Conv, BN, ReLU for the standard branch.
    """
    _check_alignment_depth(model)
    return branch_correlation(model, dataset, stats, batch_size, alignment=True).alignment


def two_pass_correlation(x: np.ndarray, y: np.ndarray) -> float:
    """Reference correlation on fully materialized vectors."""
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    dx, dy = x - x.mean(), y - y.mean()
    return float((dx * dy).sum() / math.sqrt((dx * dx).sum() * (dy * dy).sum()))
