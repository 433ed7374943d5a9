"""Client-depth and Laplace-noise mitigations, with sweep harnesses."""

from __future__ import annotations

import csv
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import model as M
from . import privacy as P
from . import training as Tr
from .ecg import BeatDataset

log = logging.getLogger(__name__)

FIXED_UNIT = "fixed-unit"
PER_CHANNEL_RANGE = "per-channel-range"
DEPTHS = (2, 3, 4, 5, 6, 7, 8)
EPSILONS = (10.0, 7.0, 5.0, 3.0, 1.0)
NO_DP = math.inf


@dataclass(frozen=True)
class DpConfig:
    epsilon: float
    sensitivity_policy: str = PER_CHANNEL_RANGE
    seed: int = 0

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if self.sensitivity_policy not in (FIXED_UNIT, PER_CHANNEL_RANGE):
            raise ValueError(f"unknown sensitivity policy {self.sensitivity_policy!r}")


def sensitivity(activation: np.ndarray, policy: str) -> np.ndarray | float:
    if policy == FIXED_UNIT:
        return 1.0
    # channel axis is -2 for both (C, L) and (B, C, L)
    axes = tuple(i for i in range(activation.ndim) if i != activation.ndim - 2)
    return np.ptp(activation, axis=axes, keepdims=True)


def laplace_noise(activation, cfg: DpConfig, rng: np.random.Generator | None = None) -> np.ndarray:
    """Add i.i.d. Laplace(0, sensitivity / epsilon) noise to every element."""
    a = np.asarray(activation, dtype=np.float64)
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    scale = sensitivity(a, cfg.sensitivity_policy) / cfg.epsilon
    return a + rng.laplace(0.0, 1.0, a.shape) * scale


class LaplaceMechanism:
    """Stateful noise source applied by the client before transmission."""

    def __init__(self, cfg: DpConfig):
        self.cfg = cfg
        self.rng = np.random.default_rng(cfg.seed)

    def __call__(self, activation: np.ndarray) -> np.ndarray:
        return laplace_noise(activation, self.cfg, self.rng)


@dataclass
class SweepResult:
    kind: str
    axis: float
    seed: int
    accuracy: float
    report: P.LeakageReport | None = None
    history: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)
    error: str | None = None


@dataclass(frozen=True)
class SweepSettings:
    epochs: int = 50
    batch_size: int = 32
    learning_rate: float = 0.001
    sample_count: int | None = None
    tap: str = "wire"
    exact: bool = False
    sensitivity_policy: str = PER_CHANNEL_RANGE


def _leakage_set(dataset: BeatDataset, settings: SweepSettings, seed: int) -> np.ndarray:
    x, _ = dataset.arrays("test")
    return x[P.sample_indices(len(x), settings.sample_count, seed)]


def _run_point(kind: str, axis: float, seed: int, dataset: BeatDataset, settings: SweepSettings) -> SweepResult:
    try:
        train, test = dataset.arrays("train"), dataset.arrays("test")
        sync = Tr.SyncConfig(seed=seed, learning_rate=settings.learning_rate, batch_size=settings.batch_size,
                             total_batches=Tr.num_batches(len(train[0]), settings.batch_size),
                             epochs=settings.epochs, exact=settings.exact)
        meta: dict = {"kind": kind, "axis": axis, "seed": seed}
        if kind == "depth":
            config = M.build_depth_k(int(axis))
            train_noise = eval_noise = None
        else:
            config = M.build_two_layer()
            train_noise = eval_noise = None
            if math.isfinite(axis):
                dp = DpConfig(axis, settings.sensitivity_policy, seed)
                train_noise = LaplaceMechanism(dp)
                eval_noise = LaplaceMechanism(DpConfig(axis, settings.sensitivity_policy, seed + 7919))
                meta["sensitivity_policy"] = settings.sensitivity_policy
        result = Tr.train_split_local(config, train, test, sync, noise=train_noise)
        client, _ = M.split(config, result.params)
        report = P.channel_leakage(client, _leakage_set(dataset, settings, seed), tap=settings.tap,
                                   noise=eval_noise, description={"model": config.name, **meta})
        log.info("%s %s seed %d: acc %.4f max dCor %.3f", kind, axis, seed, result.final_accuracy, report.max_dcor)
        return SweepResult(kind, axis, seed, result.final_accuracy, report, result.history, meta)
    except Exception as exc:  # one failed point must not sink the sweep
        log.exception("%s sweep point %s (seed %d) failed", kind, axis, seed)
        return SweepResult(kind, axis, seed, float("nan"), error=f"{type(exc).__name__}: {exc}")


def _run_all(kind, axes, seeds, dataset, settings, workers: int) -> list[SweepResult]:
    jobs = [(kind, a, s, dataset, settings) for a in axes for s in seeds]
    if workers <= 1:
        return [_run_point(*job) for job in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_point, *zip(*jobs)))


def depth_sweep(k_values=DEPTHS, seeds=(0, 1, 2), dataset: BeatDataset | None = None,
                settings: SweepSettings = SweepSettings(), workers: int = 1) -> list[SweepResult]:
    """Train the split model with ``k`` client conv layers for every k and seed."""
    if dataset is None:
        raise ValueError("depth_sweep needs a dataset")
    return _run_all("depth", [float(k) for k in k_values], list(seeds), dataset, settings, workers)


def dp_sweep(eps_values=EPSILONS, seeds=(0, 1, 2), dataset: BeatDataset | None = None,
             settings: SweepSettings = SweepSettings(), workers: int = 1,
             include_baseline: bool = True) -> list[SweepResult]:
    """Two-layer split training with Laplace noise on the wire tensor per epsilon.

    With ``include_baseline`` a noise-free run (axis = inf) is added first.
    """
    if dataset is None:
        raise ValueError("dp_sweep needs a dataset")
    axes = ([NO_DP] if include_baseline else []) + [float(e) for e in eps_values]
    return _run_all("dp", axes, list(seeds), dataset, settings, workers)


# ---------------------------------------------------------------------------
# Summaries and CSV output
# ---------------------------------------------------------------------------

@dataclass
class AxisSummary:
    axis: float
    accuracy_mean: float
    accuracy_std: float
    max_dcor_mean: float
    max_dcor_std: float
    mean_dcor: float
    min_dtw_mean: float
    runs: int


def summarize(results: list[SweepResult]) -> list[AxisSummary]:
    """Seed mean and standard deviation per axis value, in sweep order."""
    axes = list(dict.fromkeys(r.axis for r in results))
    out = []
    for axis in axes:
        ok = [r for r in results if r.axis == axis and r.error is None]
        if not ok:
            out.append(AxisSummary(axis, *([float("nan")] * 6), 0))
            continue
        acc = np.array([r.accuracy for r in ok])
        mx = np.array([r.report.max_dcor for r in ok])
        out.append(AxisSummary(
            axis, float(acc.mean()), float(acc.std()), float(mx.mean()), float(mx.std()),
            float(np.mean([r.report.mean_dcor for r in ok])),
            float(np.mean([r.report.min_dtw for r in ok])), len(ok)))
    return out


def _fmt_axis(axis: float) -> str:
    if math.isinf(axis):
        return "inf"
    return str(int(axis)) if float(axis).is_integer() else repr(axis)


def write_sweep_csvs(results: list[SweepResult], out_dir) -> dict[str, str]:
    os.makedirs(out_dir, exist_ok=True)
    paths = {name: os.path.join(out_dir, name) for name in
             ("sweep_accuracy.csv", "sweep_leakage.csv", "sweep_summary.csv", "distributions.csv")}
    with open(paths["sweep_accuracy.csv"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["axis", "seed", "accuracy", "error"])
        for r in results:
            w.writerow([_fmt_axis(r.axis), r.seed, f"{r.accuracy:.6f}", r.error or ""])
    with open(paths["sweep_leakage.csv"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["axis", "seed", "channel", "dcor_mean", "dtw_mean"])
        for r in results:
            if r.report is None:
                continue
            for c in r.report.channels:
                w.writerow([_fmt_axis(r.axis), r.seed, c.channel, f"{c.dcor_mean:.8g}", f"{c.dtw_mean:.8g}"])
    with open(paths["sweep_summary.csv"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["axis", "accuracy_mean", "accuracy_std", "max_dcor_mean", "max_dcor_std",
                    "mean_dcor", "min_dtw_mean", "runs"])
        for s in summarize(results):
            w.writerow([_fmt_axis(s.axis), f"{s.accuracy_mean:.6f}", f"{s.accuracy_std:.6f}",
                        f"{s.max_dcor_mean:.6f}", f"{s.max_dcor_std:.6f}", f"{s.mean_dcor:.6f}",
                        f"{s.min_dtw_mean:.6f}", s.runs])
    distribution_dump(results, paths["distributions.csv"])
    return paths


def select_channels(report: P.LeakageReport) -> dict[str, list[int]]:
    """Top-2 / bottom-2 channels by dCor mean and by DTW mean."""
    by_dcor = [c.channel for c in report.by_dcor()]
    by_dtw = [c.channel for c in report.by_dtw()]
    return {
        "dcor_top": by_dcor[:2], "dcor_bottom": by_dcor[-2:],
        "dtw_most_similar": by_dtw[:2], "dtw_least_similar": by_dtw[-2:],
    }


def distribution_dump(results: list[SweepResult], path) -> int:
    """Per-sample metric values for the selected channels at every axis point.

    Channels are chosen once, at the sweep's base point (first axis value,
    first seed); that seed's runs supply the distributions.  Returns the
    number of data rows written.
    """
    done = [r for r in results if r.report is not None]
    rows = 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["axis", "group", "channel", "sample", "value", "mu"])
        if not done:
            return 0
        base_seed = done[0].seed
        chain = [r for r in done if r.seed == base_seed]
        picks = select_channels(chain[0].report)
        for r in chain:
            for group, channels in picks.items():
                metric = r.report.dcor if group.startswith("dcor") else r.report.dtw
                for ch in channels:
                    values = metric[:, ch]
                    mu = math.fsum(values.tolist()) / len(values)
                    for i, v in enumerate(values):
                        w.writerow([_fmt_axis(r.axis), group, ch, i, f"{v:.17g}", f"{mu:.17g}"])
                        rows += 1
    return rows
