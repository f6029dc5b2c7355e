"""Network builders: the 2-branch shake ResNet and the skipless variants.

Families
--------
``shake_resnet``  stem, 3 stages of two-branch residual blocks with identity
                  skips (two-flow shortcut where the shape changes), head.
``arch_a``        same blocks without the skip path.
``arch_b``        skipless, single ``ReLU-Conv3x3-BN`` per branch, twice the blocks.
``arch_c``        skipless, ``ReLU-Conv3x3-ReLU-Conv3x3`` (no batch norm, biased convs).

Without a skip path the first block of stages 2 and 3 downsamples with a
stride-2 first convolution in each branch.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import ops
from .errors import ConfigError
from .shake import TEST, TRAIN, ShakeCoefficients, ShakeConfig, shake_combine
from .tensor import Parameter, ParamSet, Tensor

FAMILIES = ("shake_resnet", "arch_a", "arch_b", "arch_c")
_ALIASES = {
    "shakeresnet": "shake_resnet",
    "resnet": "shake_resnet",
    "archa": "arch_a",
    "archb": "arch_b",
    "archc": "arch_c",
    "a": "arch_a",
    "b": "arch_b",
    "c": "arch_c",
}


def normalize_family(name: str) -> str:
    key = str(name).strip().lower().replace("-", "_")
    key = _ALIASES.get(key.replace("_", ""), key)
    if key not in FAMILIES:
        raise ConfigError(f"unknown model family {name!r}; expected one of {', '.join(FAMILIES)}")
    return key


@dataclass(frozen=True)
class ModelSpec:
    family: str = "shake_resnet"
    depth: int = 26
    base_width: int = 32
    num_classes: int = 10
    shake: ShakeConfig = field(default_factory=ShakeConfig)
    stem_width: int = 16
    in_channels: int = 3

    def __post_init__(self):
        object.__setattr__(self, "family", normalize_family(self.family))
        if self.base_width < 1 or self.num_classes < 2 or self.stem_width < 1:
            raise ConfigError("base_width, stem_width must be >= 1 and num_classes >= 2")
        per = 3 if self.family == "arch_b" else 6
        if self.depth < per + 2 or (self.depth - 2) % per:
            raise ConfigError(
                f"depth {self.depth} invalid for {self.family}: need depth = {per}*k + 2 with k >= 1"
            )

    @property
    def convs_per_branch(self) -> int:
        return 1 if self.family == "arch_b" else 2

    @property
    def blocks_per_stage(self) -> int:
        return (self.depth - 2) // (3 * self.convs_per_branch)

    @property
    def widths(self) -> tuple[int, int, int]:
        w = self.base_width
        return (w, 2 * w, 4 * w)

    @property
    def has_skip(self) -> bool:
        return self.family == "shake_resnet"

    @property
    def has_bn(self) -> bool:
        return self.family != "arch_c"

    def with_shake(self, shake: ShakeConfig) -> "ModelSpec":
        return replace(self, shake=shake)

    def to_dict(self) -> dict:
        return {
            "family": self.family,
            "depth": self.depth,
            "base_width": self.base_width,
            "num_classes": self.num_classes,
            "stem_width": self.stem_width,
            "in_channels": self.in_channels,
            "shake": self.shake.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        d = dict(d)
        shake = ShakeConfig(**d.pop("shake", {}))
        return cls(shake=shake, **d)


# ---------------------------------------------------------------- layers


class Layer:
    """A named component of a network. Stateless layers only override ``__call__``."""

    kind = "layer"

    def __call__(self, x: Tensor, phase: str) -> Tensor:
        raise NotImplementedError

    def named_parameters(self, prefix: str) -> dict[str, Parameter]:
        return {}

    def named_buffers(self, prefix: str) -> dict[str, np.ndarray]:
        return {}


class ReLU(Layer):
    kind = "relu"

    def __call__(self, x, phase):
        return ops.relu(x)


class Conv2d(Layer):
    kind = "conv"

    def __init__(self, cin, cout, k, stride, rng, dtype, bias=False):
        self.stride = stride
        self.padding = k // 2
        std = np.sqrt(2.0 / (cin * k * k))
        self.weight = Parameter(rng.normal(0.0, std, (cout, cin, k, k)).astype(dtype))
        self.bias = Parameter(np.zeros(cout, dtype=dtype), decay=False) if bias else None

    def __call__(self, x, phase):
        return ops.conv2d(x, self.weight, self.bias, self.stride, self.padding)

    def named_parameters(self, prefix):
        out = {f"{prefix}.weight": self.weight}
        if self.bias is not None:
            out[f"{prefix}.bias"] = self.bias
        return out


class BatchNorm2d(Layer):
    kind = "bn"

    def __init__(self, c, dtype):
        self.scale = Parameter(np.ones(c, dtype=dtype), decay=False)
        self.shift = Parameter(np.zeros(c, dtype=dtype), decay=False)
        self.running_mean = np.zeros(c, dtype=dtype)
        self.running_var = np.ones(c, dtype=dtype)

    def __call__(self, x, phase):
        return ops.batchnorm2d(
            x, self.scale, self.shift, self.running_mean, self.running_var, training=phase == TRAIN
        )

    def named_parameters(self, prefix):
        return {f"{prefix}.scale": self.scale, f"{prefix}.shift": self.shift}

    def named_buffers(self, prefix):
        return {f"{prefix}.running_mean": self.running_mean, f"{prefix}.running_var": self.running_var}


class Sequence(Layer):
    def __init__(self, layers: list[Layer]):
        self.layers = list(layers)

    @property
    def structure(self) -> tuple[str, ...]:
        return tuple(layer.kind for layer in self.layers)

    def __call__(self, x, phase, capture: list | None = None):
        for layer in self.layers:
            x = layer(x, phase)
            if capture is not None:
                capture.append(x)
        return x

    def named_parameters(self, prefix):
        out = {}
        for i, layer in enumerate(self.layers):
            out.update(layer.named_parameters(f"{prefix}.{i}.{layer.kind}"))
        return out

    def named_buffers(self, prefix):
        out = {}
        for i, layer in enumerate(self.layers):
            out.update(layer.named_buffers(f"{prefix}.{i}.{layer.kind}"))
        return out


class TwoFlowShortcut(Layer):
    """Two concatenated flows of 1x1 avg-pool (given stride) + 1x1 conv.

    The second flow moves its sampling grid one pixel right and down (the
    content is shifted up-left by one pixel), so the strided pooling samples
    the odd positions instead of the even ones. The vacated last row and
    column are never sampled at stride 2.
    """

    kind = "shortcut"

    def __init__(self, cin, cout, stride, rng, dtype):
        if cout % 2:
            raise ConfigError("shortcut output width must be even")
        self.stride = stride
        self.conv_a = Conv2d(cin, cout // 2, 1, 1, rng, dtype)
        self.conv_b = Conv2d(cin, cout // 2, 1, 1, rng, dtype)

    def __call__(self, x, phase):
        a = self.conv_a(ops.avgpool2d(x, 1, self.stride), phase)
        b = self.conv_b(ops.avgpool2d(ops.pixel_shift(x, -1, -1), 1, self.stride), phase)
        return ops.concat_channels(a, b)

    def named_parameters(self, prefix):
        return {
            **self.conv_a.named_parameters(f"{prefix}.conv_a"),
            **self.conv_b.named_parameters(f"{prefix}.conv_b"),
        }


def build_downsample_skip(in_channels: int, out_channels: int, rng=None, dtype=np.float32) -> TwoFlowShortcut:
    """Stage-transition skip: halves resolution, doubles width."""
    if out_channels != 2 * in_channels:
        raise ConfigError(f"downsampling skip must double the width ({in_channels} -> {2 * in_channels})")
    rng = rng if rng is not None else np.random.default_rng(0)
    return TwoFlowShortcut(in_channels, out_channels, 2, rng, dtype)


class ShakeBlock(Layer):
    """Two parallel branches mixed by :func:`shake_combine`, plus an optional skip.

    ``skip`` is ``None`` (no skip path), ``"identity"`` or a shortcut layer.
    """

    kind = "block"

    def __init__(self, branch1: Sequence, branch2: Sequence, skip, block_id: int):
        self.branch1 = branch1
        self.branch2 = branch2
        self.skip = skip
        self.coeffs = ShakeCoefficients(block_id)

    def skip_forward(self, x, phase):
        if self.skip is None:
            return None
        if self.skip == "identity":
            return x
        return self.skip(x, phase)

    def __call__(self, x, phase):
        y1 = self.branch1(x, phase)
        y2 = self.branch2(x, phase)
        return shake_combine(self.skip_forward(x, phase), y1, y2, self.coeffs, phase)

    def named_parameters(self, prefix):
        out = {**self.branch1.named_parameters(f"{prefix}.branch1")}
        if self.branch2 is not self.branch1:
            out.update(self.branch2.named_parameters(f"{prefix}.branch2"))
        if isinstance(self.skip, Layer):
            out.update(self.skip.named_parameters(f"{prefix}.skip"))
        return out

    def named_buffers(self, prefix):
        out = {**self.branch1.named_buffers(f"{prefix}.branch1")}
        if self.branch2 is not self.branch1:
            out.update(self.branch2.named_buffers(f"{prefix}.branch2"))
        return out


class Linear(Layer):
    kind = "fc"

    def __init__(self, d, k, rng, dtype):
        bound = 1.0 / np.sqrt(d)
        self.weight = Parameter(rng.uniform(-bound, bound, (k, d)).astype(dtype))
        self.bias = Parameter(np.zeros(k, dtype=dtype), decay=False)

    def __call__(self, x, phase):
        return ops.linear(x, self.weight, self.bias)

    def named_parameters(self, prefix):
        return {f"{prefix}.weight": self.weight, f"{prefix}.bias": self.bias}


# ----------------------------------------------------------------- model


class ShakeNet:
    """Executable network: stem -> residual blocks -> ReLU, global avg-pool, FC."""

    def __init__(self, spec: ModelSpec, stem: Sequence, blocks: list[ShakeBlock], fc: Linear, dtype):
        self.spec = spec
        self.stem = stem
        self.blocks = blocks
        self.fc = fc
        self.dtype = np.dtype(dtype)
        self._params = ParamSet(self._collect_params())

    def _collect_params(self) -> dict[str, Parameter]:
        params = dict(self.stem.named_parameters("stem"))
        for i, b in enumerate(self.blocks):
            params.update(b.named_parameters(f"blocks.{i}"))
        params.update(self.fc.named_parameters("fc"))
        for name, p in params.items():
            p.name = name
        return params

    def refresh_params(self) -> None:
        """Rebuild the parameter table after blocks were rewired (e.g. tied branches)."""
        self._params = ParamSet(self._collect_params())

    @property
    def params(self) -> ParamSet:
        return self._params

    def named_buffers(self) -> dict[str, np.ndarray]:
        bufs = dict(self.stem.named_buffers("stem"))
        for i, b in enumerate(self.blocks):
            bufs.update(b.named_buffers(f"blocks.{i}"))
        return bufs

    def shake_coefficients(self) -> list[ShakeCoefficients]:
        return [b.coeffs for b in self.blocks]

    def forward(self, x, phase: str = TRAIN, probe=None) -> Tensor:
        """Logits for an NCHW batch.

        ``probe(index, block, x_in)`` is called with every block input; the
        correlation analysis uses it to re-run branches in isolation.
        """
        if phase not in (TRAIN, TEST):
            raise ConfigError(f"unknown phase {phase!r}")
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=self.dtype))
        if x.dtype != self.dtype:
            x = Tensor(x.data.astype(self.dtype))
        h = self.stem(x, phase)
        for i, block in enumerate(self.blocks):
            if probe is not None:
                probe(i, block, h)
            h = block(h, phase)
        h = ops.relu(h)
        size = h.shape[2]
        if h.shape[3] != size:
            raise ConfigError("non-square feature maps are not supported by the pooling head")
        h = ops.flatten(ops.avgpool2d(h, size, size))
        return self.fc(h, phase)

    __call__ = forward


def _branch(spec: ModelSpec, cin: int, cout: int, stride: int, rng, dtype) -> Sequence:
    bias = not spec.has_bn
    layers: list[Layer] = [ReLU(), Conv2d(cin, cout, 3, stride, rng, dtype, bias=bias)]
    if spec.has_bn:
        layers.append(BatchNorm2d(cout, dtype))
    if spec.convs_per_branch == 2:
        layers += [ReLU(), Conv2d(cout, cout, 3, 1, rng, dtype, bias=bias)]
        if spec.has_bn:
            layers.append(BatchNorm2d(cout, dtype))
    return Sequence(layers)


def build_model(spec: ModelSpec, seed: int = 0, dtype=np.float32) -> ShakeNet:
    """Instantiate any family described by ``spec`` with seeded initialization."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x1A17]))
    stem_layers: list[Layer] = [Conv2d(spec.in_channels, spec.stem_width, 3, 1, rng, dtype, bias=not spec.has_bn)]
    if spec.has_bn:
        stem_layers.append(BatchNorm2d(spec.stem_width, dtype))
    stem = Sequence(stem_layers)

    blocks: list[ShakeBlock] = []
    cin = spec.stem_width
    for stage, width in enumerate(spec.widths):
        for j in range(spec.blocks_per_stage):
            stride = 2 if (stage > 0 and j == 0) else 1
            b1 = _branch(spec, cin, width, stride, rng, dtype)
            b2 = _branch(spec, cin, width, stride, rng, dtype)
            if not spec.has_skip:
                skip = None
            elif stride == 1 and cin == width:
                skip = "identity"
            elif stride == 2:
                skip = build_downsample_skip(cin, width, rng, dtype)
            else:
                skip = TwoFlowShortcut(cin, width, 1, rng, dtype)
            blocks.append(ShakeBlock(b1, b2, skip, len(blocks)))
            cin = width
    fc = Linear(cin, spec.num_classes, rng, dtype)
    return ShakeNet(spec, stem, blocks, fc, dtype)


def build_shake_resnet(depth: int = 26, base_width: int = 32, shake: ShakeConfig | None = None, **kw) -> ShakeNet:
    spec = ModelSpec("shake_resnet", depth, base_width, shake=shake or ShakeConfig())
    return build_model(spec, **kw)


def build_arch_a(base_width: int = 32, shake: ShakeConfig | None = None, depth: int = 26, **kw) -> ShakeNet:
    return build_model(ModelSpec("arch_a", depth, base_width, shake=shake or ShakeConfig()), **kw)


def build_arch_b(base_width: int = 32, shake: ShakeConfig | None = None, depth: int = 26, **kw) -> ShakeNet:
    return build_model(ModelSpec("arch_b", depth, base_width, shake=shake or ShakeConfig()), **kw)


def build_arch_c(depth: int = 14, base_width: int = 32, shake: ShakeConfig | None = None, **kw) -> ShakeNet:
    return build_model(ModelSpec("arch_c", depth, base_width, shake=shake or ShakeConfig()), **kw)


def count_params(model: ShakeNet) -> int:
    """Number of trainable scalars (kernels, BN scale/shift, FC weight and bias)."""
    return model.params.num_scalars()


def weighted_depth(model: ShakeNet) -> int:
    """Weighted layers along one path: stem conv, one branch per block, FC."""
    n_stem = sum(1 for layer in model.stem.layers if layer.kind == "conv")
    n_blocks = sum(sum(1 for layer in b.branch1.layers if layer.kind == "conv") for b in model.blocks)
    return n_stem + n_blocks + 1


def tie_branches(model: ShakeNet) -> ShakeNet:
    """Make every block use one shared sub-network for both branches."""
    for b in model.blocks:
        b.branch2 = b.branch1
    model.refresh_params()
    return model


def copy_branch_params(model: ShakeNet) -> ShakeNet:
    """Copy branch-1 parameters and statistics into branch 2 (still distinct objects)."""
    for b in model.blocks:
        for l1, l2 in zip(b.branch1.layers, b.branch2.layers):
            for a, c in zip(l1.named_parameters("").values(), l2.named_parameters("").values()):
                c.data[...] = a.data
            for a, c in zip(l1.named_buffers("").values(), l2.named_buffers("").values()):
                c[...] = a
    return model
