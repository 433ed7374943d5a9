import csv
import os

import pytest

from splitecg import cli, ecg


def run(capsys, *argv):
    code = cli.main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


class TestPreprocess:
    def test_synthetic_cache(self, capsys, tmp_path):
        out = tmp_path / "beats.cache"
        code, text, _ = run(capsys, "preprocess", "--synthetic", "5", "--out", str(out))
        assert code == 0
        assert text.strip().splitlines()[-1] == "total 50"
        assert sum(1 for line in text.splitlines() if line.split("\t")[0] in ecg.CLASSES) == 5
        loaded = ecg.load_cache(out)
        assert len(loaded.train) + len(loaded.test) == 50

    def test_cache_bytes_deterministic(self, capsys, tmp_path):
        for name in ("a", "b"):
            run(capsys, "preprocess", "--synthetic", "4", "--seed", "3", "--out", str(tmp_path / name))
        assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()

    def test_empty_directory(self, capsys, tmp_path):
        code, _, err = run(capsys, "preprocess", "--data", str(tmp_path))
        assert code == 2 and "no WFDB records" in err

    def test_missing_dataset(self, capsys, monkeypatch):
        monkeypatch.delenv("SPLITECG_DATA", raising=False)
        code, _, err = run(capsys, "preprocess")
        assert code == 2 and "SPLITECG_DATA" in err

    def test_env_variable(self, capsys, monkeypatch, tmp_path):
        monkeypatch.setenv("SPLITECG_DATA", str(tmp_path))
        code, _, err = run(capsys, "preprocess")
        assert code == 2 and str(tmp_path) in err


class TestTrain:
    def test_role_needs_addr(self, capsys, tmp_path):
        code, _, err = run(capsys, "train", "--synthetic", "3", "--role", "client", "--out", str(tmp_path))
        assert code == 2 and "--addr" in err

    def test_depth_needs_value(self, capsys, tmp_path):
        code, _, _ = run(capsys, "train", "--synthetic", "3", "--model", "depth-k", "--out", str(tmp_path))
        assert code == 2

    def test_bad_flag_is_usage_error(self, capsys):
        assert run(capsys, "train", "--epochs", "0")[0] == 2

    def test_train_then_assess(self, capsys, tmp_path):
        run_dir, assess_dir = tmp_path / "run", tmp_path / "assess"
        code, text, _ = run(capsys, "train", "--synthetic", "6", "--epochs", "2", "--out", str(run_dir))
        assert code == 0 and "final test accuracy" in text
        assert {"model.cfg", "metrics.csv", "model.ckpt"} <= set(os.listdir(run_dir))
        rows = list(csv.reader(open(run_dir / "metrics.csv")))
        assert rows[0] == ["epoch", "loss", "test_accuracy"] and len(rows) == 3

        code, text, _ = run(capsys, "assess", "--synthetic", "6", "--checkpoint", str(run_dir / "model.ckpt"),
                            "--out", str(assess_dir))
        assert code == 0 and "total 16 channels" in text
        assert len(list(csv.reader(open(assess_dir / "leakage.csv")))) == 17
        assert sorted(f for f in os.listdir(assess_dir) if f.startswith("visual_")) == \
            [f"visual_{c}.csv" for c in sorted(ecg.CLASSES)]

    def test_split_local_with_noise(self, capsys, tmp_path):
        code, _, _ = run(capsys, "train", "--synthetic", "4", "--epochs", "1", "--epsilon", "5",
                         "--out", str(tmp_path))
        assert code == 0 and (tmp_path / "model.ckpt").exists()

    def test_checkpoint_mismatch(self, capsys, tmp_path):
        run(capsys, "train", "--synthetic", "4", "--epochs", "1", "--out", str(tmp_path))
        code, _, err = run(capsys, "assess", "--synthetic", "4", "--model", "three-layer",
                           "--checkpoint", str(tmp_path / "model.ckpt"), "--out", str(tmp_path / "a"))
        assert code == 2 and "expected shapes" in err

    def test_missing_checkpoint(self, capsys, tmp_path):
        code, _, _ = run(capsys, "assess", "--synthetic", "4", "--checkpoint", str(tmp_path / "none.ckpt"))
        assert code == 2


class TestSweep:
    def test_small_depth_sweep(self, capsys, tmp_path):
        code, text, _ = run(capsys, "sweep", "--kind", "depth", "--axis", "2,3", "--seeds", "0",
                            "--synthetic", "4", "--epochs", "1", "--samples", "8", "--out", str(tmp_path))
        assert code == 0
        assert text.strip().splitlines()[-1] == "total 2 runs, 0 failed"
        assert {"sweep_accuracy.csv", "sweep_leakage.csv", "sweep_summary.csv"} <= set(os.listdir(tmp_path))

    def test_failed_axis_point_reported(self, capsys, tmp_path):
        code, text, _ = run(capsys, "sweep", "--kind", "depth", "--axis", "2,42", "--seeds", "0",
                            "--synthetic", "4", "--epochs", "1", "--samples", "8", "--out", str(tmp_path))
        assert code == 0 and "total 2 runs, 1 failed" in text

    @pytest.mark.parametrize("kind", ["dp"])
    def test_dp_sweep(self, capsys, tmp_path, kind):
        code, text, _ = run(capsys, "sweep", "--kind", kind, "--axis", "5", "--seeds", "0",
                            "--synthetic", "4", "--epochs", "1", "--samples", "8", "--out", str(tmp_path))
        assert code == 0 and "total 2 runs" in text
        assert "dp inf" in text and "dp 5" in text
