import math

import numpy as np
import pytest

from shakeshake.checkpoint import load_model, load_training, resume_trainer, save_model, save_training
from shakeshake.data import DatasetStats, ImageDataset, batch_iter, synthetic_dataset
from shakeshake.errors import ConfigError, DivergenceError, FormatError, NonFiniteError, UsageError
from shakeshake.models import ModelSpec, build_model, tie_branches
from shakeshake.ops import softmax_cross_entropy
from shakeshake.shake import TRAIN, ShakeConfig
from shakeshake.tensor import Parameter, ParamSet, backward
from shakeshake.train import (
    SGD,
    EpochRecord,
    TrainConfig,
    Trainer,
    WarmStart,
    cosine_lr,
    evaluate,
    lr_at_epoch,
    read_metrics_csv,
    train,
    write_metrics_csv,
)

SMALL = ModelSpec("shake_resnet", depth=8, base_width=4, num_classes=2)


def small_data(n_train=128, n_test=64, k=2, size=16, seed=0):
    full = synthetic_dataset(k, n_train + n_test, seed, size)
    return (
        ImageDataset(full.images[:n_train], full.labels[:n_train], k),
        ImageDataset(full.images[n_train:], full.labels[n_train:], k),
    )


def quick_cfg(**kw):
    base = dict(epochs=3, batch_size=32, lr0=0.1, seed=0, precision="double")
    base.update(kw)
    return TrainConfig(**base)


class TestSchedule:
    def test_endpoints(self):
        assert cosine_lr(0, 30, 0.2) == 0.2
        assert cosine_lr(15, 30, 0.2) == 0.1
        assert cosine_lr(30, 30, 0.2) == 0.0

    def test_monotone(self):
        vals = [cosine_lr(t, 100, 0.2) for t in np.linspace(0, 100, 1001)]
        assert all(b <= a for a, b in zip(vals, vals[1:]))

    def test_out_of_range(self):
        with pytest.raises(UsageError):
            cosine_lr(31, 30, 0.2)

    def test_warm_start(self):
        cfg = TrainConfig(epochs=11, lr0=0.05, warm_start=WarmStart(0.025, 1))
        assert lr_at_epoch(0, cfg) == 0.025
        assert lr_at_epoch(1, cfg) == 0.05
        assert lr_at_epoch(6, cfg) == pytest.approx(0.025)

    @pytest.mark.parametrize(
        "kw", [dict(epochs=0), dict(lr0=0.0), dict(momentum=1.0), dict(weight_decay=-1.0), dict(precision="half")]
    )
    def test_invalid_config(self, kw):
        with pytest.raises(ConfigError):
            TrainConfig(**kw)


class TestSGD:
    def param(self, value, decay=True):
        p = Parameter(np.array([value]), "p", decay=decay)
        return p, ParamSet({"p": p})

    def test_vanilla(self):
        p, ps = self.param(0.0)
        p.grad = np.ones(1)
        SGD(ps, momentum=0, weight_decay=0).step(0.1)
        assert p.data[0] == pytest.approx(-0.1) and p.grad is None

    def test_momentum_recurrence(self):
        p, ps = self.param(0.0)
        opt = SGD(ps, momentum=0.9, weight_decay=0)
        for _ in range(2):
            p.grad = np.ones(1)
            opt.step(1.0)
        assert opt.velocity["p"][0] == pytest.approx(1.9) and p.data[0] == pytest.approx(-2.9)

    def test_decay_only(self):
        p, ps = self.param(1.0)
        p.grad = np.zeros(1)
        SGD(ps, momentum=0, weight_decay=0.1).step(1.0)
        assert p.data[0] == pytest.approx(0.9)

    def test_decay_skips_flagged(self):
        p, ps = self.param(1.0, decay=False)
        p.grad = np.zeros(1)
        SGD(ps, momentum=0, weight_decay=0.1).step(1.0)
        assert p.data[0] == 1.0

    def test_nan_gradient(self):
        p, ps = self.param(1.0)
        p.grad = np.array([np.nan])
        with pytest.raises(NonFiniteError):
            SGD(ps).step(0.1)
        assert p.data[0] == 1.0

    def test_bn_params_not_decayed(self):
        model = build_model(SMALL)
        for name, p in model.params.items():
            assert p.decay == (name.endswith("weight") and ".bn" not in name and "stem.1" not in name), name


class TestTrainer:
    def test_three_step_oracle(self):
        """Trainer steps agree with a hand-written forward/backward/update loop."""
        train_set, _ = small_data(96, 8)
        cfg = quick_cfg(epochs=1, momentum=0.9, weight_decay=5e-4)
        trainer = Trainer(build_model(SMALL.with_shake(ShakeConfig.from_code("E-E-B")), dtype=np.float64), train_set, None, cfg, augment=False)
        trainer.run_epoch()

        model = build_model(SMALL.with_shake(ShakeConfig.from_code("E-E-B")), dtype=np.float64)
        for c in model.shake_coefficients():
            c.frozen = True
        stats = DatasetStats.compute(train_set)
        velocity = {}
        for x, y in batch_iter(train_set, 32, True, trainer.data_rng(0), False, stats, np.float64):
            for c in model.shake_coefficients():
                c.alpha = c.beta = np.full(len(y), 0.5)
            backward(softmax_cross_entropy(model(x, TRAIN), y))
            for name, p in model.params.items():
                g = p.grad + (5e-4 * p.data if p.decay else 0.0)
                velocity[name] = 0.9 * velocity[name] + g if name in velocity else g
                p.data = p.data - 0.1 * velocity[name]
                p.grad = None
        for name, p in model.params.items():
            np.testing.assert_allclose(trainer.model.params[name].data, p.data, rtol=1e-12, atol=1e-14)

    def test_smoke_run_learns(self):
        train_set, test_set = small_data(256, 64)
        cfg = quick_cfg(epochs=10, precision="single")
        model = build_model(SMALL.with_shake(ShakeConfig.from_code("E-E-B")), dtype=np.float32)
        records = train(model, train_set, cfg, test_set)
        assert len(records) == 10
        assert records[-1].train_err < 5.0
        assert all(0 <= r.train_err <= 100 and 0 <= r.test_err <= 100 for r in records)

    @pytest.mark.parametrize("code", ["E-E-B", "S-S-I", "S-M3-I"])
    def test_deterministic(self, code):
        train_set, test_set = small_data()

        def run():
            model = build_model(SMALL.with_shake(ShakeConfig.from_code(code)), seed=3)
            return train(model, train_set, quick_cfg(epochs=2, seed=3, precision="single"), test_set)

        assert run() == run()

    def test_seed_changes_run(self):
        train_set, _ = small_data()
        spec = SMALL.with_shake(ShakeConfig.from_code("S-S-I"))
        a = train(build_model(spec), train_set, quick_cfg(epochs=1, seed=0))
        b = train(build_model(spec), train_set, quick_cfg(epochs=1, seed=1))
        assert a != b

    def test_divergence_reported(self):
        train_set, _ = small_data(64, 8)
        spec = ModelSpec("arch_c", 8, 4, num_classes=2, shake=ShakeConfig.from_code("S-E-I"))
        with pytest.raises(DivergenceError) as info:
            train(build_model(spec), train_set, quick_cfg(epochs=2, lr0=1e6, precision="single"))
        assert 0 <= info.value.epoch < 2 and info.value.step >= 0
        assert "epoch" in str(info.value)

    def test_metrics_csv_roundtrip(self, tmp_path):
        recs = [EpochRecord(0, 0.2, 0.5, 10.0, 12.5, 1.25), EpochRecord(1, 0.1, 1 / 3, 5.0, 7.0, 1.5)]
        write_metrics_csv(tmp_path / "m.csv", recs, deterministic=True)
        assert read_metrics_csv(tmp_path / "m.csv") == recs
        assert tmp_path.joinpath("m.csv").read_text().splitlines()[1].endswith(",")


class TestEvaluate:
    class Fixed:
        dtype = np.float64

        def __init__(self, fn):
            self.fn = fn

        def __call__(self, x, phase):
            return self.fn(x)

    def test_perfect_on_one_class(self):
        ds = ImageDataset(np.zeros((20, 3, 4, 4)), np.zeros(20), 2)
        model = self.Fixed(lambda x: np.tile([10.0, -10.0], (len(x), 1)))
        assert evaluate(model, ds)["error"] == 0.0

    def test_random_logits_baseline(self):
        n = 10_000
        ds = ImageDataset(np.zeros((n, 1, 1, 1)), np.arange(n) % 10, 10)
        rng = np.random.default_rng(0)
        model = self.Fixed(lambda x: rng.normal(size=(len(x), 10)))
        assert abs(evaluate(model, ds, batch_size=1000)["error"] - 90.0) < 3.0

    def test_repeatable(self):
        _, test_set = small_data()
        model = build_model(SMALL)
        assert evaluate(model, test_set) == evaluate(model, test_set)

    def test_uniform_loss(self):
        ds = ImageDataset(np.zeros((5, 1, 1, 1)), np.arange(5) % 4, 4)
        out = evaluate(self.Fixed(lambda x: np.zeros((len(x), 4))), ds)
        assert out["loss"] == pytest.approx(math.log(4))


class TestCheckpoint:
    def test_model_roundtrip(self, tmp_path):
        train_set, test_set = small_data()
        model = build_model(SMALL.with_shake(ShakeConfig.from_code("S-S-I")))
        trainer = Trainer(model, train_set, test_set, quick_cfg(epochs=1, precision="single"))
        trainer.fit()
        before = evaluate(model, test_set, trainer.stats)
        save_training(tmp_path / "a.ckpt", trainer)
        loaded, meta = load_model(tmp_path / "a.ckpt")
        assert evaluate(loaded, test_set, DatasetStats.from_dict(meta["stats"])) == before
        for name, p in model.params.items():
            assert np.array_equal(p.data, loaded.params[name].data)
        for name, b in model.named_buffers().items():
            assert np.array_equal(b, loaded.named_buffers()[name])

    def test_tied_model_roundtrip(self, tmp_path):
        model = tie_branches(build_model(SMALL))
        save_model(tmp_path / "t.ckpt", model)
        loaded, _ = load_model(tmp_path / "t.ckpt")
        assert all(b.branch1 is b.branch2 for b in loaded.blocks)

    @pytest.mark.parametrize("code", ["E-E-B", "S-S-I"])
    def test_resume_equivalence(self, tmp_path, code):
        train_set, test_set = small_data()
        spec = SMALL.with_shake(ShakeConfig.from_code(code))
        cfg = quick_cfg(epochs=4, precision="single")
        full = Trainer(build_model(spec), train_set, test_set, cfg).fit()

        first = Trainer(build_model(spec), train_set, test_set, cfg)
        first.run_epoch()
        first.run_epoch()
        save_training(tmp_path / "mid.ckpt", first)
        resumed = resume_trainer(tmp_path / "mid.ckpt", train_set, test_set)
        assert resumed.epoch == 2
        assert resumed.fit() == full[2:]

    def test_truncated(self, tmp_path):
        model = build_model(SMALL)
        save_model(tmp_path / "m.ckpt", model)
        raw = (tmp_path / "m.ckpt").read_bytes()
        for cut in (4, len(raw) // 2, len(raw) - 1):
            (tmp_path / "bad.ckpt").write_bytes(raw[:cut])
            with pytest.raises(FormatError):
                load_model(tmp_path / "bad.ckpt")

    def test_corrupted_byte(self, tmp_path):
        save_model(tmp_path / "m.ckpt", build_model(SMALL))
        raw = bytearray((tmp_path / "m.ckpt").read_bytes())
        raw[len(raw) // 2] ^= 0xFF
        (tmp_path / "bad.ckpt").write_bytes(bytes(raw))
        with pytest.raises(FormatError):
            load_model(tmp_path / "bad.ckpt")

    def test_not_a_training_checkpoint(self, tmp_path):
        save_model(tmp_path / "m.ckpt", build_model(SMALL))
        with pytest.raises(FormatError):
            load_training(tmp_path / "m.ckpt")

    def test_shape_mismatch_applies_nothing(self, tmp_path):
        from shakeshake.checkpoint import _apply_model_tensors, read_checkpoint

        save_model(tmp_path / "m.ckpt", build_model(SMALL, seed=1))
        tensors, _ = read_checkpoint(tmp_path / "m.ckpt")
        last = sorted(k for k in tensors if k.startswith("param/"))[-1]
        tensors[last] = np.zeros(3, dtype=np.float32)
        target = build_model(SMALL, seed=2)
        snapshot = {k: p.data.copy() for k, p in target.params.items()}
        with pytest.raises(FormatError):
            _apply_model_tensors(target, tensors, "m.ckpt")
        assert all(np.array_equal(p.data, snapshot[k]) for k, p in target.params.items())
