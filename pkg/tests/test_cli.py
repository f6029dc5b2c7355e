import csv
import json

import numpy as np
import pytest

from shakeshake import cli, shake
from shakeshake.checkpoint import save_model
from shakeshake.data import synthetic_dataset, write_cifar10_bin
from shakeshake.models import ModelSpec, build_model, tie_branches


def quickstart(tmp_path, **overrides):
    cfg = {
        "model": {"family": "shake_resnet", "depth": 8, "base_width": 4, "num_classes": 2},
        "shake": {"forward": "even", "backward": "even", "level": "batch"},
        "train": {"epochs": 3, "batch_size": 32, "lr0": 0.1, "seed": 0},
        "data": {"source": "synthetic", "n_train": 96, "n_test": 32, "image_size": 16},
        "output_dir": str(tmp_path / "run"),
    }
    for section, values in overrides.items():
        if isinstance(values, dict):
            cfg[section] = {**cfg.get(section, {}), **values}
        else:
            cfg[section] = values
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg))
    return path


@pytest.fixture(autouse=True)
def no_env_output(monkeypatch):
    monkeypatch.delenv(cli.OUTPUT_ENV, raising=False)


class TestTrain:
    def test_quickstart(self, tmp_path):
        assert cli.main(["train", "--config", str(quickstart(tmp_path))]) == 0
        run = tmp_path / "run"
        rows = list(csv.DictReader(open(run / "metrics.csv")))
        assert [r["epoch"] for r in rows] == ["0", "1", "2"]
        assert all(r["seconds"] == "" for r in rows)
        assert (run / "final.ckpt").exists() and (run / "timing.csv").exists()
        resolved = json.loads((run / "resolved_config.json").read_text())
        assert resolved["train"]["momentum"] == 0.9 and resolved["shake"]["alpha_lo"] == 0.0

    def test_byte_identical_reruns(self, tmp_path):
        cfg = quickstart(tmp_path, shake={"forward": "shake", "backward": "shake", "level": "image"})
        assert cli.main(["train", "--config", str(cfg)]) == 0
        first = (tmp_path / "run" / "metrics.csv").read_bytes()
        assert cli.main(["train", "--config", str(cfg)]) == 0
        assert (tmp_path / "run" / "metrics.csv").read_bytes() == first

    def test_alpha_interval_error_names_field(self, tmp_path, capsys):
        cfg = quickstart(tmp_path, shake={"forward": "shake", "backward": "shake", "alpha_lo": 0.7, "alpha_hi": 0.3})
        assert cli.main(["train", "--config", str(cfg)]) == 1
        assert "alpha_lo" in capsys.readouterr().err

    @pytest.mark.parametrize(
        "override,field",
        [
            ({"model": {"depth": 9}}, "model"),
            ({"train": {"momentum": 1.5}}, "train.momentum"),
            ({"shake": {"backward": "sideways"}}, "shake"),
            ({"data": {"source": "cifar10"}}, "data"),
            ({"train": {"lr": 0.1}}, "train.lr"),
        ],
    )
    def test_invalid_configs(self, tmp_path, capsys, override, field):
        assert cli.main(["train", "--config", str(quickstart(tmp_path, **override))]) == 1
        assert field in capsys.readouterr().err

    def test_missing_config(self, tmp_path, capsys):
        assert cli.main(["train", "--config", str(tmp_path / "nope.json")]) == 1
        assert "not found" in capsys.readouterr().err

    def test_divergence_exit(self, tmp_path, capsys):
        cfg = quickstart(
            tmp_path,
            model={"family": "arch_c", "depth": 8},
            shake={"forward": "shake", "backward": "even", "level": "image"},
            train={"lr0": 1e6, "momentum": 0.9},
        )
        assert cli.main(["train", "--config", str(cfg)]) == 2
        report = json.loads((tmp_path / "run" / "divergence.json").read_text())
        assert {"epoch", "step", "reason"} <= set(report)
        err = capsys.readouterr().err
        assert f"epoch {report['epoch']}" in err and f"step {report['step']}" in err

    def test_output_env_override(self, tmp_path, monkeypatch):
        monkeypatch.setenv(cli.OUTPUT_ENV, str(tmp_path / "elsewhere"))
        assert cli.main(["train", "--config", str(quickstart(tmp_path, train={"epochs": 1}))]) == 0
        assert (tmp_path / "elsewhere" / "metrics.csv").exists()


class TestEvalAnalyze:
    @pytest.fixture
    def trained(self, tmp_path):
        assert cli.main(["train", "--config", str(quickstart(tmp_path))]) == 0
        return tmp_path / "run" / "final.ckpt"

    def test_eval_matches_training_record(self, trained, capsys):
        capsys.readouterr()
        assert cli.main(["eval", "--ckpt", str(trained), "--data", "synthetic"]) == 0
        first = json.loads(capsys.readouterr().out)
        last = list(csv.DictReader(open(trained.parent / "metrics.csv")))[-1]
        assert first["error"] == float(last["test_err"]) and first["n"] == 32
        assert cli.main(["eval", "--ckpt", str(trained), "--data", "synthetic"]) == 0
        assert json.loads(capsys.readouterr().out) == first

    def test_eval_cifar_file(self, tmp_path, capsys):
        spec = ModelSpec("shake_resnet", 8, 4)
        save_model(tmp_path / "m.ckpt", build_model(spec))
        write_cifar10_bin(tmp_path / "test_batch.bin", synthetic_dataset(10, 20, 0, 32))
        assert cli.main(["eval", "--ckpt", str(tmp_path / "m.ckpt"), "--data", str(tmp_path / "test_batch.bin")]) == 0
        assert json.loads(capsys.readouterr().out)["n"] == 20

    def test_missing_checkpoint(self, tmp_path, capsys):
        assert cli.main(["eval", "--ckpt", str(tmp_path / "none.ckpt"), "--data", "synthetic"]) == 1
        assert "none.ckpt" in capsys.readouterr().err

    def test_bad_data_path(self, trained, tmp_path):
        assert cli.main(["eval", "--ckpt", str(trained), "--data", str(tmp_path / "missing")]) == 1

    def test_analyze_twin(self, tmp_path):
        model = tie_branches(build_model(ModelSpec("shake_resnet", 8, 4), dtype=np.float64))
        save_model(tmp_path / "twin.ckpt", model)
        write_cifar10_bin(tmp_path / "t.bin", synthetic_dataset(10, 24, 0, 32))
        code = cli.main(["analyze", "--ckpt", str(tmp_path / "twin.ckpt"), "--data", str(tmp_path / "t.bin"), "--alignment"])
        assert code == 0
        rows = list(csv.DictReader(open(tmp_path / "correlation.csv")))
        assert len(rows) == 3 and all(float(r["correlation"]) == 1.0 for r in rows)
        align = list(csv.DictReader(open(tmp_path / "alignment.csv")))
        assert len(align) == 27
        assert all(float(r["correlation"]) == 1.0 for r in align if r["m"] == r["n"])

    def test_analyze_trained(self, trained):
        assert cli.main(["analyze", "--ckpt", str(trained), "--data", "synthetic"]) == 0
        rows = list(csv.DictReader(open(trained.parent / "correlation.csv")))
        assert len(rows) == 3 and all(-1 <= float(r["correlation"]) <= 1 for r in rows)


class TestVerify:
    def test_passes(self, capsys):
        assert cli.main(["verify"]) == 0
        out = capsys.readouterr().out
        assert "[FAIL]" not in out and "6/6 checks passed" in out

    def test_corrupted_backward_rule(self, monkeypatch, capsys):
        monkeypatch.setattr(shake, "_scale_upstream", lambda g, c: g * (1 - c.reshape((-1,) + (1,) * (g.ndim - 1))))
        assert cli.main(["verify"]) == 3
        assert "[FAIL] shake backward contract" in capsys.readouterr().out

    def test_usage(self):
        assert cli.main([]) == 1
        assert cli.main(["bogus"]) == 1
