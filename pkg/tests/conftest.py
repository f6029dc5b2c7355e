import numpy as np
import pytest

from shakeshake.models import ModelSpec
from shakeshake.shake import ShakeConfig
from shakeshake.tensor import Tensor, backward


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_spec():
    """depth-8, width-4 shake ResNet; one block per stage."""
    return ModelSpec("shake_resnet", depth=8, base_width=4, shake=ShakeConfig.from_code("E-E-B"))


def numeric_grad(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central differences of scalar ``f`` w.r.t. every entry of ``x`` (modified in place, restored)."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b) -> float:
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-12))


def check_op_grads(op, arrays, seed=0, tol=1e-6):
    """Project op output on a random direction and compare all input grads with finite differences."""
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    out = op(*tensors)
    w = np.random.default_rng(seed).normal(size=out.shape)

    def loss():
        return float((op(*[Tensor(t.data) for t in tensors]).data * w).sum())

    backward(out, w)
    for t in tensors:
        num = numeric_grad(loss, t.data)
        assert rel_err(t.grad, num) < tol, (t.shape, rel_err(t.grad, num))


# one "[PASS]/[FAIL] criterion N ..." line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
