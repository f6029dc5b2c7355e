"""Self-checks: finite-difference gradcheck, shake contracts, parameter counts."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ConfigError
from .models import ModelSpec, ShakeNet, build_model, build_shake_resnet, count_params
from .ops import record_relu_masks, softmax_cross_entropy
from .shake import (
    TRAIN,
    BackwardMode,
    ForwardMode,
    Level,
    RngStream,
    ShakeCoefficients,
    ShakeConfig,
    beta_rule,
    shake_combine,
    step_coefficients,
)
from .tensor import Tensor, backward
from .train import cosine_lr


@dataclass
class GradcheckReport:
    max_rel_error: dict[str, float] = field(default_factory=dict)
    checked_entries: int = 0
    kink_skipped: int = 0

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)


def _is_true_gradient(cfg: ShakeConfig) -> bool:
    if cfg.backward is BackwardMode.KEEP:
        return True
    return cfg.forward is ForwardMode.EVEN and cfg.backward is BackwardMode.EVEN


def gradcheck(
    spec: ModelSpec,
    *,
    batch_size: int = 4,
    image_size: int = 8,
    seed: int = 0,
    max_entries: int | None = 24,
    floor: float = 1e-6,
) -> GradcheckReport:
    """Compare backward against central differences for every parameter tensor.

    Only configurations whose backward pass is the true gradient of the
    realized forward function are accepted (Keep backward, or Even-Even).
    Coefficients are drawn once and frozen for all evaluations. Per entry the
    relative error is ``|a - n| / max(|a|, |n|, floor)``; ``max_entries``
    caps how many randomly chosen entries of each tensor are probed.

    An entry whose +h and -h evaluations see different ReLU activation
    patterns straddles a kink, where central differences are meaningless; such
    entries are counted in ``kink_skipped`` instead of being scored.
    """
    if not _is_true_gradient(spec.shake):
        raise ConfigError(
            f"gradcheck rejected for {spec.shake.code}: with this backward mode the "
            "backward pass is deliberately not the gradient of the forward function"
        )
    model = build_model(spec, seed=seed, dtype=np.float64)
    rng = np.random.default_rng(seed + 1)
    x = rng.normal(size=(batch_size, spec.in_channels, image_size, image_size))
    y = rng.integers(0, spec.num_classes, size=batch_size)

    coeffs = model.shake_coefficients()
    stream = RngStream(seed + 2)
    step_coefficients(coeffs, spec.shake, stream, batch_size=batch_size)
    step_coefficients(coeffs, spec.shake, stream)
    for c in coeffs:
        c.frozen = True

    def loss_value() -> tuple[float, list]:
        with record_relu_masks() as masks:
            loss = float(softmax_cross_entropy(model(x, TRAIN), y).data)
        return loss, masks

    model.params.zero_grad()
    backward(softmax_cross_entropy(model(x, TRAIN), y))
    analytic = {k: v.copy() for k, v in model.params.grads().items()}

    report = GradcheckReport()
    for name, p in model.params.items():
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        a_flat = analytic[name].reshape(-1)
        worst = 0.0
        for i in idx:
            orig = flat[i]
            h = 1e-4 * max(1.0, abs(orig))
            flat[i] = orig + h
            lp, mask_p = loss_value()
            flat[i] = orig - h
            lm, mask_m = loss_value()
            flat[i] = orig
            if mask_p != mask_m:
                report.kink_skipped += 1
                continue
            num = (lp - lm) / (2 * h)
            a = a_flat[i]
            worst = max(worst, abs(a - num) / max(abs(a), abs(num), floor))
        report.max_rel_error[name] = worst
    report.checked_entries = sum(
        min(p.data.size, max_entries or p.data.size) for p in model.params.values()
    ) - report.kink_skipped
    return report


# --------------------------------------------------------------- contracts


def backward_contract_violations(betas=None, levels=(Level.BATCH, Level.IMAGE), seed: int = 0) -> int:
    """Count mismatches between combine-node branch gradients and beta * upstream."""
    betas = np.round(np.linspace(0, 1, 11), 10) if betas is None else betas
    rng = np.random.default_rng(seed)
    n = 4
    bad = 0
    for level in levels:
        for beta in betas:
            b1 = Tensor(rng.normal(size=(n, 3, 4, 4)), requires_grad=True)
            b2 = Tensor(rng.normal(size=(n, 3, 4, 4)), requires_grad=True)
            xs = Tensor(rng.normal(size=(n, 3, 4, 4)), requires_grad=True)
            if level is Level.BATCH:
                beta_arr = np.full(n, beta)
            else:
                beta_arr = np.clip(beta + rng.uniform(-0.05, 0.05, n), 0, 1)
            c = ShakeCoefficients(0, alpha=rng.uniform(size=n), beta=beta_arr)
            out = shake_combine(xs, b1, b2, c, TRAIN)
            up = rng.normal(size=out.shape)
            backward(out, up)
            scale = beta_arr.reshape(-1, 1, 1, 1)
            bad += int(not np.array_equal(b1.grad, up * scale))
            bad += int(not np.array_equal(b2.grad, up * (1.0 - beta_arr).reshape(-1, 1, 1, 1)))
            bad += int(not np.array_equal(xs.grad, up))
    return bad


def rule_range_violations(steps: int = 101) -> dict[str, int]:
    """Violations of the M1..M5 interval properties on an (alpha, r) grid."""
    grid = np.linspace(0.0, 1.0, steps)
    a, r = (g.ravel() for g in np.meshgrid(grid, grid, indexing="ij"))
    low = a < 0.5
    tol = 1e-12

    def within(v, lo, hi):
        return (v >= np.minimum(lo, hi) - tol) & (v <= np.maximum(lo, hi) + tol)

    out = {}
    b = beta_rule(BackwardMode.M1, a, r)
    out["M1"] = int((np.abs(b - (1 - a)) > tol).sum())
    b = beta_rule(BackwardMode.M2, a, r)
    out["M2"] = int((~np.where(low, within(b, 0, a), within(b, a, 1))).sum())
    b = beta_rule(BackwardMode.M3, a, r)
    out["M3"] = int((~within(b, a, 0.5)).sum())
    b = beta_rule(BackwardMode.M4, a, r)
    out["M4"] = int((~np.where(low, within(b, 0.5, 1 - a), within(b, 1 - a, 0.5))).sum())
    b = beta_rule(BackwardMode.M5, a, r)
    out["M5"] = int((~np.where(low, within(b, 1 - a, 1), within(b, 0, 1 - a))).sum())
    return out


# ------------------------------------------------------------------ runner


@dataclass
class CheckResult:
    name: str
    passed: bool
    measured: str
    seconds: float = 0.0

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"[{status}] {self.name}: {self.measured} ({self.seconds:.1f}s)"


GRADCHECK_SPEC = ModelSpec("shake_resnet", depth=8, base_width=4)


def _check_gradcheck(code: str) -> tuple[bool, str]:
    rep = gradcheck(GRADCHECK_SPEC.with_shake(ShakeConfig.from_code(code)))
    return rep.worst < 1e-4, f"max rel err {rep.worst:.2e} over {rep.checked_entries} entries, {rep.kink_skipped} kink-straddling skipped (tol 1e-4)"


def _check_param_counts() -> tuple[bool, str]:
    msgs, ok = [], True
    for width, target in ((32, 2.9e6), (96, 26.2e6)):
        n = count_params(build_shake_resnet(26, width))
        rel = abs(n - target) / target
        ok &= rel < 0.02
        msgs.append(f"26 2x{width}d={n} ({rel:.2%} from {target / 1e6:.1f}M)")
    return ok, "; ".join(msgs)


def _check_rules() -> tuple[bool, str]:
    v = rule_range_violations()
    return sum(v.values()) == 0, ", ".join(f"{k}={n}" for k, n in v.items()) + " violations"


def _check_contract() -> tuple[bool, str]:
    bad = backward_contract_violations()
    return bad == 0, f"{bad} mismatching gradients"


def _check_cosine() -> tuple[bool, str]:
    lr0, total = 0.2, 30
    vals = [cosine_lr(t, total, lr0) for t in range(total + 1)]
    ok = vals[0] == lr0 and vals[15] == lr0 / 2 and vals[-1] == 0.0
    ok &= all(b <= a for a, b in zip(vals, vals[1:]))
    return ok, f"lr(0)={vals[0]}, lr(T/2)={vals[15]}, lr(T)={vals[-1]}"


CHECKS: list[tuple[str, Callable[[], tuple[bool, str]]]] = [
    ("gradcheck E-E-B", lambda: _check_gradcheck("E-E-B")),
    ("gradcheck S-K-I (frozen coefficients)", lambda: _check_gradcheck("S-K-I")),
    ("shake backward contract", _check_contract),
    ("beta rule ranges M1-M5", _check_rules),
    ("cosine schedule", _check_cosine),
    ("parameter counts", _check_param_counts),
]


def run_checks(checks=None) -> list[CheckResult]:
    results = []
    for name, fn in checks or CHECKS:
        t0 = time.perf_counter()
        try:
            ok, msg = fn()
        except Exception as exc:  # a crashing check is a failing check
            ok, msg = False, f"error: {exc!r}"
        results.append(CheckResult(name, bool(ok), msg, time.perf_counter() - t0))
    return results


