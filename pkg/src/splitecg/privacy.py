"""Leakage measures between raw beats and split-layer activations."""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import model as M
from .ecg import CLASSES


def _pairwise_centered(v: np.ndarray) -> np.ndarray:
    """Double-centred |v_j - v_k| for each row of ``v`` (P, n) -> (P, n, n)."""
    d = np.abs(v[:, :, None] - v[:, None, :])
    row = d.mean(axis=2, keepdims=True)
    col = d.mean(axis=1, keepdims=True)
    grand = d.mean(axis=(1, 2), keepdims=True)
    return d - row - col + grand


def distance_correlation_batch(x, y, chunk: int = 4096) -> np.ndarray:
    """Sample distance correlation of each row pair of ``x`` and ``y`` (P, n)."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    if x.shape != y.shape:
        raise ValueError(f"length mismatch: {x.shape} vs {y.shape}")
    if x.shape[1] < 2:
        raise ValueError("distance correlation needs at least two observations")
    out = np.empty(len(x))
    for s in range(0, len(x), chunk):
        a = _pairwise_centered(x[s:s + chunk])
        b = _pairwise_centered(y[s:s + chunk])
        dcov2 = (a * b).mean(axis=(1, 2))
        dvar_x = (a * a).mean(axis=(1, 2))
        dvar_y = (b * b).mean(axis=(1, 2))
        denom = np.sqrt(dvar_x * dvar_y)
        ok = denom > 0
        r2 = np.zeros(len(a))
        r2[ok] = np.maximum(dcov2[ok], 0.0) / denom[ok]
        out[s:s + chunk] = np.sqrt(np.minimum(r2, 1.0))
    return out


def _distance_correlation_blocked(x: np.ndarray, y: np.ndarray, block: int) -> float:
    # Same estimator without materialising n x n matrices, using
    # mean(A * B) = mean(a * b) - 2 mean(row_a * row_b) + grand_a * grand_b
    n = len(x)
    row_a, row_b = np.empty(n), np.empty(n)
    s_ab = s_aa = s_bb = 0.0
    for s in range(0, n, block):
        a = np.abs(x[s:s + block, None] - x[None, :])
        b = np.abs(y[s:s + block, None] - y[None, :])
        row_a[s:s + block] = a.mean(axis=1)
        row_b[s:s + block] = b.mean(axis=1)
        s_ab += float(np.sum(a * b))
        s_aa += float(np.sum(a * a))
        s_bb += float(np.sum(b * b))
    ga, gb = row_a.mean(), row_b.mean()
    dcov2 = s_ab / n**2 - 2.0 * np.mean(row_a * row_b) + ga * gb
    dvar_x = s_aa / n**2 - 2.0 * np.mean(row_a * row_a) + ga * ga
    dvar_y = s_bb / n**2 - 2.0 * np.mean(row_b * row_b) + gb * gb
    denom = np.sqrt(max(dvar_x, 0.0) * max(dvar_y, 0.0))
    if denom <= 0:
        return 0.0
    return float(np.sqrt(min(max(dcov2, 0.0) / denom, 1.0)))


def distance_correlation(x, y, block: int = 512) -> float:
    """dCov(x, y) / sqrt(dVar(x) dVar(y)) with the double-centring estimator.

    Returns 0 when either sample is constant.  Long samples are processed in
    row blocks so memory stays O(block * n).
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if len(x) != len(y):
        raise ValueError(f"length mismatch: {len(x)} vs {len(y)}")
    if len(x) > 4 * block:
        return _distance_correlation_blocked(x, y, block)
    return float(distance_correlation_batch(x[None], y[None])[0])


def avg_downsample(raw, target_len: int) -> np.ndarray:
    """Means over non-overlapping windows of ``len(raw) / target_len`` samples."""
    raw = np.asarray(raw, dtype=np.float64)
    n = raw.shape[-1]
    if target_len < 1 or n % target_len:
        raise ValueError(f"{target_len} does not divide {n}")
    return raw.reshape(*raw.shape[:-1], target_len, n // target_len).mean(axis=-1)


def dtw_batch(x, y) -> np.ndarray:
    """Accumulated cost of the optimal warping path for each row pair.

    ``x`` is (P, N), ``y`` is (P, M); the local cost is |x_i - y_j|.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    if x.shape[1] == 0 or y.shape[1] == 0:
        raise ValueError("DTW needs non-empty sequences")
    if len(x) != len(y):
        raise ValueError("x and y need the same number of rows")
    n, m = x.shape[1], y.shape[1]
    prev = np.empty((len(x), m))
    cost = np.abs(x[:, 0, None] - y)
    prev[:, 0] = cost[:, 0]
    for j in range(1, m):
        prev[:, j] = prev[:, j - 1] + cost[:, j]
    cur = np.empty_like(prev)
    for i in range(1, n):
        cost = np.abs(x[:, i, None] - y)
        cur[:, 0] = prev[:, 0] + cost[:, 0]
        best_diag = np.minimum(prev[:, 1:], prev[:, :-1])
        for j in range(1, m):
            cur[:, j] = cost[:, j] + np.minimum(best_diag[:, j - 1], cur[:, j - 1])
        prev, cur = cur, prev
    return prev[:, -1].copy()


def dtw_distance(x, y) -> float:
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    return float(dtw_batch(x[None], y[None])[0])


# ---------------------------------------------------------------------------
# Per-channel aggregation
# ---------------------------------------------------------------------------

@dataclass
class ChannelLeakage:
    channel: int
    dcor_mean: float
    dtw_mean: float
    samples: int


@dataclass
class LeakageReport:
    description: dict
    channels: list[ChannelLeakage]
    dcor: np.ndarray = field(repr=False)      # (samples, channels)
    dtw: np.ndarray = field(repr=False)
    constant_flags: int = 0

    def by_dcor(self) -> list[ChannelLeakage]:
        return sorted(self.channels, key=lambda c: (-c.dcor_mean, c.channel))

    def by_dtw(self) -> list[ChannelLeakage]:
        return sorted(self.channels, key=lambda c: (c.dtw_mean, c.channel))

    @property
    def max_dcor(self) -> float:
        return max(c.dcor_mean for c in self.channels)

    @property
    def min_dcor(self) -> float:
        return min(c.dcor_mean for c in self.channels)

    @property
    def mean_dcor(self) -> float:
        return math.fsum(c.dcor_mean for c in self.channels) / len(self.channels)

    @property
    def min_dtw(self) -> float:
        return min(c.dtw_mean for c in self.channels)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["channel", "dcor_mean", "dtw_mean", "samples"])
            for c in self.channels:
                w.writerow([c.channel, f"{c.dcor_mean:.10g}", f"{c.dtw_mean:.10g}", c.samples])


def _column_mean(values: np.ndarray) -> float:
    # exactly rounded, hence independent of sample order
    return math.fsum(values.tolist()) / len(values)


def split_activations(part: M.ModelPart, x: np.ndarray, tap: str = "wire",
                      noise: Callable[[np.ndarray], np.ndarray] | None = None,
                      batch: int = 256) -> np.ndarray:
    """Client activations for ``x`` at the wire tensor or the pre-pool tap."""
    outs = []
    tap_at = None
    if tap == "prepool":
        tap_at = len(part.layers)
        while part.layers[tap_at - 1].kind == M.POOL:
            tap_at -= 1
    elif tap != "wire":
        raise ValueError(f"unknown tap {tap!r}")
    for s in range(0, len(x), batch):
        a = part.forward(x[s:s + batch], tap=tap_at)
        part.clear()
        if tap_at is not None:
            a = part.tapped
        if noise is not None:
            a = noise(a)
        outs.append(a)
    return np.concatenate(outs)


def leakage_from_activations(raw: np.ndarray, acts: np.ndarray, description: dict | None = None,
                             chunk: int = 2048) -> LeakageReport:
    """Per-channel dCor and DTW between raw beats (S, 128) and activations (S, C, L)."""
    raw = np.asarray(raw, dtype=np.float64).reshape(len(raw), -1)
    s, c, length = acts.shape
    if s == 0:
        raise ValueError("empty sample set")
    down = avg_downsample(raw, length)
    dcor = np.empty((s, c))
    dtw = np.empty((s, c))
    constant = 0
    for start in range(0, s, chunk):
        stop = min(s, start + chunk)
        a = acts[start:stop].reshape(-1, length)
        d = np.repeat(down[start:stop], c, axis=0)
        r = np.repeat(raw[start:stop], c, axis=0)
        constant += int(np.sum(np.ptp(a, axis=1) == 0))
        dcor[start:stop] = distance_correlation_batch(d, a).reshape(-1, c)
        dtw[start:stop] = dtw_batch(r, a).reshape(-1, c)
    channels = [ChannelLeakage(k, _column_mean(dcor[:, k]), _column_mean(dtw[:, k]), s) for k in range(c)]
    return LeakageReport(dict(description or {}), channels, dcor, dtw, constant)


def channel_leakage(part: M.ModelPart, x: np.ndarray, tap: str = "wire",
                    noise: Callable[[np.ndarray], np.ndarray] | None = None,
                    description: dict | None = None) -> LeakageReport:
    """Leakage of every split-layer channel averaged over the beats ``x`` (S, 1, 128)."""
    acts = split_activations(part, x, tap=tap, noise=noise)
    desc = {"tap": tap, **(description or {})}
    return leakage_from_activations(x, acts, desc)


def sample_indices(n_available: int, count: int | None, seed: int) -> np.ndarray:
    """Uniform draw without replacement, default min(10000, n_available)."""
    count = min(10000 if count is None else count, n_available)
    return np.sort(np.random.default_rng(seed).choice(n_available, size=count, replace=False))


def export_visual(part: M.ModelPart, beats: dict[int, np.ndarray], out_dir, tap: str = "wire") -> list[str]:
    """One CSV per class with the raw beat and its most correlated channel."""
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for label, raw in sorted(beats.items()):
        raw = np.asarray(raw, dtype=np.float64).reshape(-1)
        acts = split_activations(part, raw[None, None, :], tap=tap)[0]
        scores = distance_correlation_batch(np.repeat(avg_downsample(raw, acts.shape[1])[None], len(acts), 0), acts)
        best = int(np.argmax(scores))
        path = os.path.join(out_dir, f"visual_{CLASSES[label]}.csv")
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["raw", f"channel_{best}"])
            for i in range(len(raw)):
                w.writerow([f"{raw[i]:.8g}", f"{acts[best, i]:.8g}" if i < acts.shape[1] else ""])
        paths.append(path)
    return paths
