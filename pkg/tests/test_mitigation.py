import csv
import math

import numpy as np
import pytest

from splitecg import ecg
from splitecg import mitigation as Mi
from splitecg import model as M
from splitecg import privacy as P


class TestLaplace:
    def test_mean_and_variance(self):
        cfg = Mi.DpConfig(1.0, Mi.FIXED_UNIT, seed=0)
        noise = Mi.laplace_noise(np.zeros(10**6), cfg)
        assert abs(noise.mean()) <= 0.01
        assert noise.var() == pytest.approx(2.0, rel=0.05)

    def test_scale_is_sensitivity_over_epsilon(self):
        noise = Mi.laplace_noise(np.zeros(10**6), Mi.DpConfig(4.0, Mi.FIXED_UNIT, seed=1))
        assert noise.var() == pytest.approx(2 * 0.25 ** 2, rel=0.05)

    def test_large_epsilon_limit(self):
        rng = np.random.default_rng(0)
        cfg = Mi.DpConfig(1e9, Mi.FIXED_UNIT)
        for _ in range(1000):
            a = rng.normal(size=(2, 3, 4))
            assert np.max(np.abs(Mi.laplace_noise(a, cfg, rng) - a)) <= 1e-6

    def test_per_channel_range(self):
        a = np.zeros((4, 3, 8))
        a[:, 0] = np.linspace(0, 2, 8)     # range 2
        a[:, 1] = 0.7                     # constant: no noise
        a[:, 2] = np.linspace(-1, 0, 8)    # range 1
        np.testing.assert_array_equal(Mi.sensitivity(a, Mi.PER_CHANNEL_RANGE).ravel(), [2.0, 0.0, 1.0])
        out = Mi.laplace_noise(a, Mi.DpConfig(1.0, Mi.PER_CHANNEL_RANGE, seed=3))
        np.testing.assert_array_equal(out[:, 1], a[:, 1])
        assert np.all(out[:, 0] != a[:, 0])

    def test_range_taken_over_the_batch(self):
        a = np.zeros((2, 1, 4))
        a[1] = 3.0
        assert Mi.sensitivity(a, Mi.PER_CHANNEL_RANGE).ravel().tolist() == [3.0]

    def test_zero_sensitivity_identity(self):
        a = np.full((3, 16, 32), 0.25)
        np.testing.assert_array_equal(Mi.laplace_noise(a, Mi.DpConfig(0.5, seed=9)), a)

    def test_shape_preserved(self):
        a = np.random.default_rng(0).normal(size=(5, 16, 32))
        assert Mi.laplace_noise(a, Mi.DpConfig(1.0)).shape == a.shape

    def test_reproducible(self):
        a = np.random.default_rng(0).normal(size=(5, 16, 32))
        cfg = Mi.DpConfig(2.0, seed=11)
        np.testing.assert_array_equal(Mi.laplace_noise(a, cfg), Mi.laplace_noise(a, cfg))
        m1, m2 = Mi.LaplaceMechanism(cfg), Mi.LaplaceMechanism(cfg)
        np.testing.assert_array_equal(m1(a), m2(a))
        assert not np.array_equal(m1(a), m2(np.zeros_like(a)) + a)

    @pytest.mark.parametrize("eps", [0.0, -1.0, float("nan")])
    def test_bad_epsilon(self, eps):
        with pytest.raises(ValueError):
            Mi.DpConfig(eps)

    def test_bad_policy(self):
        with pytest.raises(ValueError):
            Mi.DpConfig(1.0, "global")

    def test_sweep_grid(self):
        assert Mi.EPSILONS == (10.0, 7.0, 5.0, 3.0, 1.0)
        assert Mi.DEPTHS == tuple(range(2, 9))


class TestDepth:
    def test_server_identical_across_depths(self):
        ref = M.server_part(M.build_depth_k(2), 1)
        for k in range(3, 9):
            other = M.server_part(M.build_depth_k(k), 1)
            assert other.layers == ref.layers
            assert b"".join(p.tobytes() for p in other.parameters()) == b"".join(p.tobytes() for p in ref.parameters())


@pytest.fixture(scope="module")
def tiny():
    return ecg.generate_synthetic(4, seed=0)


class TestSweeps:
    def test_depth_sweep_runs_and_isolates_failures(self, tiny, tmp_path):
        settings = Mi.SweepSettings(epochs=1, sample_count=8)
        results = Mi.depth_sweep([2, 3, 42], [0], tiny, settings)
        assert [r.axis for r in results] == [2.0, 3.0, 42.0]
        assert results[2].error is not None and math.isnan(results[2].accuracy)
        assert all(r.error is None and len(r.report.channels) == 16 for r in results[:2])
        paths = Mi.write_sweep_csvs(results, tmp_path)
        rows = list(csv.DictReader(open(paths["sweep_accuracy.csv"])))
        assert [r["axis"] for r in rows] == ["2", "3", "42"] and rows[2]["error"]
        leak = list(csv.DictReader(open(paths["sweep_leakage.csv"])))
        assert len(leak) == 32 and set(leak[0]) == {"axis", "seed", "channel", "dcor_mean", "dtw_mean"}
        summary = list(csv.DictReader(open(paths["sweep_summary.csv"])))
        assert {"accuracy_mean", "accuracy_std", "max_dcor_mean", "max_dcor_std"} <= set(summary[0])

    def test_dp_sweep_has_baseline_and_metadata(self, tiny):
        settings = Mi.SweepSettings(epochs=1, sample_count=8)
        results = Mi.dp_sweep([5.0], [0, 1], tiny, settings)
        assert [r.axis for r in results] == [math.inf, math.inf, 5.0, 5.0]
        assert results[2].meta["sensitivity_policy"] == Mi.PER_CHANNEL_RANGE
        summary = Mi.summarize(results)
        assert [s.runs for s in summary] == [2, 2]

    def test_sweep_is_deterministic(self, tiny):
        settings = Mi.SweepSettings(epochs=1, sample_count=8)
        a = Mi.dp_sweep([3.0], [0], tiny, settings, include_baseline=False)[0]
        b = Mi.dp_sweep([3.0], [0], tiny, settings, include_baseline=False)[0]
        assert a.accuracy == b.accuracy
        np.testing.assert_array_equal(a.report.dcor, b.report.dcor)

    def test_requires_dataset(self):
        with pytest.raises(ValueError):
            Mi.depth_sweep([2], [0], None)


def _fake_result(axis, seed, samples=6, channels=16):
    rng = np.random.default_rng(int(seed * 100 + (axis if math.isfinite(axis) else 0)))
    raw = rng.uniform(size=(samples, 1, 128))
    acts = rng.normal(size=(samples, channels, 32))
    acts[:, 0] = P.avg_downsample(raw[:, 0], 32)
    report = P.leakage_from_activations(raw, acts)
    return Mi.SweepResult("dp", axis, seed, 0.9, report)


class TestDistributionDump:
    def test_contract(self, tmp_path):
        axes = [math.inf, 10.0, 5.0, 1.0]
        results = [_fake_result(a, s) for a in axes for s in (0, 1)]
        path = tmp_path / "dist.csv"
        rows_written = Mi.distribution_dump(results, path)
        rows = list(csv.DictReader(open(path)))
        assert rows_written == len(rows) == 6 * 8 * len(axes)
        assert set(rows[0]) == {"axis", "group", "channel", "sample", "value", "mu"}
        for (axis, group, ch), members in _group(rows).items():
            values = [float(r["value"]) for r in members]
            assert abs(float(members[0]["mu"]) - math.fsum(values) / len(values)) <= 1e-9

    def test_selection_at_base_point(self, tmp_path):
        results = [_fake_result(a, 0) for a in (math.inf, 1.0)]
        picks = Mi.select_channels(results[0].report)
        assert picks["dcor_top"][0] == 0
        path = tmp_path / "dist.csv"
        Mi.distribution_dump(results, path)
        rows = [r for r in csv.DictReader(open(path)) if r["axis"] == "1" and r["group"] == "dcor_top"]
        assert sorted({int(r["channel"]) for r in rows}) == sorted(picks["dcor_top"])

    def test_empty(self, tmp_path):
        assert Mi.distribution_dump([], tmp_path / "d.csv") == 0


def _group(rows):
    out = {}
    for r in rows:
        out.setdefault((r["axis"], r["group"], r["channel"]), []).append(r)
    return out
