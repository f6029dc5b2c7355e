"""Shake-shake coefficients and the two-branch combination node.

Training step contract::

    step_coefficients(coeffs, cfg, rng, batch_size=n)   # draw alpha
    logits = model(x, "train")                           # forward uses alpha
    loss = softmax_cross_entropy(logits, y)
    step_coefficients(coeffs, cfg, rng)                  # draw beta from alpha
    backward(loss)                                       # branch grads scaled by beta

Random numbers come from a single :class:`RngStream` (numpy ``PCG64``,
``Generator.random`` doubles). Draws are taken block by block in network
order; within a block, one draw per image at Image level and a single draw
at Batch level. Even and Keep consume no draws.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .errors import ConfigError, UsageError
from .tensor import Tensor, as_tensor, make_node


class ForwardMode(str, Enum):
    EVEN = "even"
    SHAKE = "shake"


class BackwardMode(str, Enum):
    EVEN = "even"
    SHAKE = "shake"
    KEEP = "keep"
    M1 = "m1"
    M2 = "m2"
    M3 = "m3"
    M4 = "m4"
    M5 = "m5"


class Level(str, Enum):
    BATCH = "batch"
    IMAGE = "image"


TRAIN = "train"
TEST = "test"

_LETTERS = {"e": "even", "s": "shake", "k": "keep", "b": "batch", "i": "image"}


def _parse_enum(enum_cls, value):
    if isinstance(value, enum_cls):
        return value
    v = str(value).strip().lower()
    v = _LETTERS.get(v, v)
    try:
        return enum_cls(v)
    except ValueError:
        choices = ", ".join(m.value for m in enum_cls)
        raise ConfigError(f"invalid {enum_cls.__name__} {value!r}; expected one of {choices}") from None


@dataclass(frozen=True)
class ShakeConfig:
    """Forward mode, backward mode, level and the interval alpha is drawn from."""

    forward: ForwardMode = ForwardMode.SHAKE
    backward: BackwardMode = BackwardMode.SHAKE
    level: Level = Level.IMAGE
    alpha_lo: float = 0.0
    alpha_hi: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "forward", _parse_enum(ForwardMode, self.forward))
        object.__setattr__(self, "backward", _parse_enum(BackwardMode, self.backward))
        object.__setattr__(self, "level", _parse_enum(Level, self.level))
        lo, hi = float(self.alpha_lo), float(self.alpha_hi)
        if not (0.0 <= lo <= hi <= 1.0):
            raise ConfigError(f"alpha interval must satisfy 0 <= alpha_lo <= alpha_hi <= 1, got [{lo}, {hi}]")
        object.__setattr__(self, "alpha_lo", lo)
        object.__setattr__(self, "alpha_hi", hi)

    @classmethod
    def from_code(cls, code: str, alpha_lo: float = 0.0, alpha_hi: float = 1.0) -> "ShakeConfig":
        """Parse shorthand such as ``"S-S-I"``, ``"E-E-B"`` or ``"S-M3-I"``."""
        parts = code.replace("_", "-").split("-")
        if len(parts) == 2:
            parts.append("B")  # E-E has no level; Batch is as good as any
        if len(parts) != 3:
            raise ConfigError(f"cannot parse shake code {code!r}")
        return cls(parts[0], parts[1], parts[2], alpha_lo, alpha_hi)

    @property
    def code(self) -> str:
        b = self.backward.value
        b = b.upper() if b.startswith("m") else b[0].upper()
        return f"{self.forward.value[0].upper()}-{b}-{self.level.value[0].upper()}"

    def to_dict(self) -> dict:
        return {
            "forward": self.forward.value,
            "backward": self.backward.value,
            "level": self.level.value,
            "alpha_lo": self.alpha_lo,
            "alpha_hi": self.alpha_hi,
        }


class RngStream:
    """Seeded PCG64 stream that counts how many doubles it has produced."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self.draws = 0
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def uniform(self, n: int, lo: float = 0.0, hi: float = 1.0) -> np.ndarray:
        u = self._gen.random(n)
        self.draws += n
        if lo == 0.0 and hi == 1.0:
            return u
        return lo + (hi - lo) * u

    def get_state(self) -> dict:
        return {"seed": self.seed, "draws": self.draws, "bit_generator": self._gen.bit_generator.state}

    def set_state(self, state: dict) -> None:
        self.seed = int(state["seed"])
        self.draws = int(state["draws"])
        self._gen.bit_generator.state = state["bit_generator"]


@dataclass
class ShakeCoefficients:
    """Per-image forward (alpha) and backward (beta) coefficients of one block."""

    block_id: int
    alpha: np.ndarray | None = None
    beta: np.ndarray | None = None
    frozen: bool = field(default=False)


def _draw(cfg: ShakeConfig, n: int, rng: RngStream, lo: float, hi: float) -> np.ndarray:
    if cfg.level is Level.BATCH:
        return np.full(n, rng.uniform(1, lo, hi)[0])
    return rng.uniform(n, lo, hi)


def sample_alpha(cfg: ShakeConfig, batch_size: int, rng: RngStream) -> np.ndarray:
    if cfg.forward is ForwardMode.EVEN:
        return np.full(batch_size, 0.5)
    return _draw(cfg, batch_size, rng, cfg.alpha_lo, cfg.alpha_hi)


def beta_rule(mode: BackwardMode, alpha: np.ndarray, r: np.ndarray) -> np.ndarray:
    """Randomized beta update rules M1..M5, given alpha and uniform ``r``."""
    alpha = np.asarray(alpha, dtype=np.float64)
    r = np.asarray(r, dtype=np.float64)
    low = alpha < 0.5
    if mode is BackwardMode.M1:
        return 1.0 - alpha
    if mode is BackwardMode.M2:
        return np.where(low, r * alpha, r * (1.0 - alpha) + alpha)
    if mode is BackwardMode.M3:
        return np.where(low, r * (0.5 - alpha) + alpha, r * (alpha - 0.5) + 0.5)
    if mode is BackwardMode.M4:
        return np.where(low, r * (0.5 - alpha) + 0.5, r * (0.5 - (1.0 - alpha)) + (1.0 - alpha))
    if mode is BackwardMode.M5:
        return np.where(low, r * alpha + (1.0 - alpha), r * (1.0 - alpha))
    raise ConfigError(f"{mode} is not one of M1..M5")


def sample_beta(cfg: ShakeConfig, alpha: np.ndarray, rng: RngStream) -> np.ndarray:
    alpha = np.asarray(alpha, dtype=np.float64)
    n = alpha.shape[0]
    mode = cfg.backward
    if mode is BackwardMode.KEEP:
        return alpha.copy()
    if mode is BackwardMode.EVEN:
        return np.full(n, 0.5)
    if mode is BackwardMode.SHAKE:
        return _draw(cfg, n, rng, cfg.alpha_lo, cfg.alpha_hi)
    r = _draw(cfg, n, rng, 0.0, 1.0)
    return beta_rule(mode, alpha, r)


def step_coefficients(
    coeffs: list[ShakeCoefficients],
    cfg: ShakeConfig,
    rng: RngStream,
    batch_size: int | None = None,
) -> None:
    """Resample coefficients for every block, in block order.

    With ``batch_size`` this is the pre-forward update (fresh alpha, beta
    cleared); without it, the pre-backward update (beta from the stored alpha).
    Frozen coefficients are left untouched.
    """
    if batch_size is not None:
        for c in coeffs:
            if c.frozen:
                continue
            c.alpha = sample_alpha(cfg, batch_size, rng)
            c.beta = None
        return
    for c in coeffs:
        if c.frozen:
            continue
        if c.alpha is None:
            raise UsageError(f"block {c.block_id}: beta requested before alpha was sampled")
        if c.beta is not None:
            raise UsageError(f"block {c.block_id}: beta already sampled for this step")
    for c in coeffs:
        if not c.frozen:
            c.beta = sample_beta(cfg, c.alpha, rng)


def _scale_upstream(upstream: np.ndarray, coeff: np.ndarray) -> np.ndarray:
    """Per-image scaling of a gradient (or activation) slice by ``coeff``."""
    return upstream * coeff.reshape((-1,) + (1,) * (upstream.ndim - 1)).astype(upstream.dtype)


def shake_combine(
    x_skip: Tensor | None,
    branch1: Tensor,
    branch2: Tensor,
    coeffs: ShakeCoefficients,
    phase: str = TRAIN,
) -> Tensor:
    """``x_skip + alpha*branch1 + (1-alpha)*branch2`` with beta on the way back.

    ``x_skip`` may be ``None`` for skipless architectures. In the test phase
    both coefficients are the constant 0.5. In training the backward rule
    reads ``coeffs.beta`` when the gradient arrives, so beta may be sampled
    after the forward pass.
    """
    branch1, branch2 = as_tensor(branch1), as_tensor(branch2)
    if branch1.shape != branch2.shape:
        raise ConfigError(f"branch outputs differ in shape: {branch1.shape} vs {branch2.shape}")
    if x_skip is not None:
        x_skip = as_tensor(x_skip)
        if x_skip.shape != branch1.shape:
            raise ConfigError(f"skip shape {x_skip.shape} does not match branch shape {branch1.shape}")
    n = branch1.shape[0]

    if phase == TEST:
        alpha = np.full(n, 0.5)
    elif phase == TRAIN:
        if coeffs.alpha is None:
            raise UsageError(f"block {coeffs.block_id}: forward pass before alpha was sampled")
        alpha = coeffs.alpha
        if alpha.shape != (n,):
            raise ConfigError(f"block {coeffs.block_id}: {alpha.shape[0]} coefficients for batch of {n}")
    else:
        raise ConfigError(f"unknown phase {phase!r}")

    out = _scale_upstream(branch1.data, alpha) + _scale_upstream(branch2.data, 1.0 - alpha)
    if x_skip is not None:
        out = x_skip.data + out

    def _backward(g):
        if phase == TEST:
            beta = np.full(n, 0.5)
        else:
            beta = coeffs.beta
            if beta is None:
                raise UsageError(f"block {coeffs.block_id}: backward pass before beta was sampled")
        g1 = _scale_upstream(g, beta)
        g2 = _scale_upstream(g, 1.0 - beta)
        return g1, g2, g

    parents = (branch1, branch2) if x_skip is None else (branch1, branch2, x_skip)
    return make_node(out, parents, _backward, "shake_combine")
