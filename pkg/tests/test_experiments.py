import pytest

from shakeshake.data import synthetic_dataset, write_cifar10_bin
from shakeshake.errors import ConfigError
from shakeshake.experiments import DirectionResult, main, regularization_direction


@pytest.fixture
def fake_cifar(tmp_path):
    root = tmp_path / "cifar-10-batches-bin"
    root.mkdir()
    ds = synthetic_dataset(10, 40, seed=0)
    for name in [f"data_batch_{i}.bin" for i in range(1, 6)] + ["test_batch.bin"]:
        write_cifar10_bin(root / name, ds)
    return root


def test_runs_every_pair(fake_cifar):
    res = regularization_direction(fake_cifar, subset=32, epochs=2, seeds=(0, 1), depth=8, width=4,
                                   batch_size=16, budget_seconds=None, test_subset=8)
    assert res.status == "complete"
    assert {k: len(v) for k, v in res.final_train_err.items()} == {"E-E-B": 2, "S-E-I": 2, "S-S-I": 2}
    assert isinstance(res.ordered, bool) and "mean_train_err" in res.to_dict()


def test_budget_guard(fake_cifar):
    res = regularization_direction(fake_cifar, subset=32, epochs=2, depth=8, width=4, budget_seconds=1e-9)
    assert res.status == "over_budget" and res.projected_seconds > 0 and not res.ordered


def test_missing_data(tmp_path, monkeypatch):
    monkeypatch.delenv("SHAKESHAKE_CIFAR10_DIR", raising=False)
    with pytest.raises(ConfigError):
        regularization_direction(tmp_path)
    assert main(["--cifar", str(tmp_path)]) == 1


def test_ordering_rule():
    res = DirectionResult(("E-E-B", "S-E-I", "S-S-I"), {"E-E-B": [1.0, 3.0], "S-E-I": [2.0, 2.5], "S-S-I": [4.0, 1.0]})
    assert res.ordered  # per-seed inversions are allowed; only the means count
    res.final_train_err["S-S-I"] = [1.0, 1.0]
    assert not res.ordered
