"""Heartbeat extraction and preprocessing for MIT-BIH style records.

The chain per beat is fixed: 201-sample window around the R-peak, min-max
normalisation, Fourier resampling to 128 samples, then wavelet denoising.
"""

from __future__ import annotations

import logging
import os
import struct
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from . import wfdb

log = logging.getLogger(__name__)

CLASSES = ("N", "L", "R", "A", "V")
CLASS_INDEX = {c: i for i, c in enumerate(CLASSES)}
HALF_WINDOW = 100
WINDOW = 2 * HALF_WINDOW + 1
BEAT_LENGTH = 128
EXCLUDED_RECORDS = frozenset({"102", "104", "107", "217", "114"})
# beats drawn per class before the 50/50 train/test split
POOL_SIZES = {"N": 6000, "L": 6000, "R": 6000, "A": 2490, "V": 6000}

# bior3.1 analysis / synthesis filters
DEC_LO = np.array([-0.3535533905932738, 1.0606601717798212, 1.0606601717798212, -0.3535533905932738])
DEC_HI = np.array([-0.1767766952966369, 0.5303300858899106, -0.5303300858899106, 0.1767766952966369])
REC_LO = np.array([0.1767766952966369, 0.5303300858899106, 0.5303300858899106, 0.1767766952966369])
REC_HI = np.array([-0.3535533905932738, -1.0606601717798212, 1.0606601717798212, 0.3535533905932738])
WAVELET_LEVEL = 3
MAD_SCALE = 0.6745


class DatasetError(ValueError):
    pass


class DegenerateWindow(ValueError):
    """A window is constant and cannot be min-max normalised."""


@dataclass
class Beat:
    samples: np.ndarray
    label: int
    record: str = ""
    r_peak: int = -1

    @property
    def symbol(self) -> str:
        return CLASSES[self.label]


@dataclass
class BeatDataset:
    train: list[Beat]
    test: list[Beat]

    def arrays(self, which: str = "train") -> tuple[np.ndarray, np.ndarray]:
        """Stacked ``(n, 1, 128)`` samples and integer labels."""
        beats = self.train if which == "train" else self.test
        if not beats:
            return np.zeros((0, 1, BEAT_LENGTH)), np.zeros(0, dtype=np.intp)
        x = np.stack([b.samples for b in beats])[:, None, :].astype(np.float64)
        y = np.array([b.label for b in beats], dtype=np.intp)
        return x, y

    def counts(self, which: str = "train") -> dict[str, int]:
        beats = self.train if which == "train" else self.test
        c = Counter(b.label for b in beats)
        return {name: c.get(i, 0) for i, name in enumerate(CLASSES)}

    def subset(self, fraction: float, seed: int = 0) -> "BeatDataset":
        """Class-stratified random fraction of both splits."""
        rng = np.random.default_rng(seed)

        def pick(beats):
            out = []
            for label in range(len(CLASSES)):
                members = [b for b in beats if b.label == label]
                k = max(1, int(round(fraction * len(members)))) if members else 0
                idx = sorted(rng.choice(len(members), size=k, replace=False)) if k else []
                out += [members[i] for i in idx]
            return out

        return BeatDataset(pick(self.train), pick(self.test))


# ---------------------------------------------------------------------------
# Record selection and segmentation
# ---------------------------------------------------------------------------

def select_records(names) -> list[str]:
    """Drop the paced records and record 114 (MLII on the lower channel)."""
    return [n for n in names if str(n) not in EXCLUDED_RECORDS]


def segment_beats(signal: np.ndarray, annotations, half: int = HALF_WINDOW):
    """Cut ``[r - half, r + half]`` around each N/L/R/A/V beat.

    A window is dropped if it leaves the signal or contains another beat
    annotation.  Returns a list of ``(window, label, r_peak)``.
    """
    peaks = np.array([a.sample for a in annotations if a.symbol in wfdb.BEAT_SYMBOLS], dtype=np.int64)
    out = []
    n = len(signal)
    for ann in annotations:
        if ann.symbol not in CLASS_INDEX:
            continue
        r = ann.sample
        lo, hi = r - half, r + half
        if lo < 0 or hi >= n:
            continue
        inside = np.count_nonzero((peaks >= lo) & (peaks <= hi))
        if inside != 1:
            continue
        out.append((np.asarray(signal[lo:hi + 1], dtype=np.float64), CLASS_INDEX[ann.symbol], r))
    return out


# ---------------------------------------------------------------------------
# Per-beat transforms
# ---------------------------------------------------------------------------

def minmax_normalize(window) -> np.ndarray:
    x = np.asarray(window, dtype=np.float64)
    lo, hi = x.min(), x.max()
    if hi <= lo:
        raise DegenerateWindow("constant window")
    return (x - lo) / (hi - lo)


def fourier_resample(x, num: int = BEAT_LENGTH) -> np.ndarray:
    """Band-limited resampling through the DFT (same convention as
    ``scipy.signal.resample``): keep the lowest ``num`` frequency bins, fold
    the Nyquist bin when ``num`` is even, scale by ``num / len(x)``."""
    x = np.asarray(x, dtype=np.float64)
    n = len(x)
    spectrum = np.fft.rfft(x)
    keep = min(num, n) // 2 + 1
    out = np.zeros(num // 2 + 1, dtype=complex)
    out[:keep] = spectrum[:keep]
    if num < n and num % 2 == 0:
        out[num // 2] = 2.0 * out[num // 2].real
    elif num > n and n % 2 == 0:
        out[n // 2] *= 0.5
    return np.fft.irfft(out, num) * (num / n)


def _dwt(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """One analysis level with half-sample symmetric extension."""
    f = len(DEC_LO)
    ext = np.pad(x, f - 1, mode="symmetric")
    size = (len(x) + f - 1) // 2
    approx = np.convolve(ext, DEC_LO)[f::2][:size]
    detail = np.convolve(ext, DEC_HI)[f::2][:size]
    return approx, detail


def _idwt(approx: np.ndarray, detail: np.ndarray) -> np.ndarray:
    f = len(REC_LO)
    if len(approx) == len(detail) + 1:
        approx = approx[:-1]
    up_a = np.zeros(2 * len(approx))
    up_d = np.zeros(2 * len(detail))
    up_a[::2] = approx
    up_d[::2] = detail
    full = np.convolve(up_a, REC_LO) + np.convolve(up_d, REC_HI)
    size = 2 * len(approx) - f + 2
    return full[f - 2: f - 2 + size]


def wavedec(x, level: int = WAVELET_LEVEL) -> list[np.ndarray]:
    """``[cA_level, cD_level, ..., cD_1]``."""
    approx = np.asarray(x, dtype=np.float64)
    details = []
    for _ in range(level):
        approx, d = _dwt(approx)
        details.append(d)
    return [approx] + details[::-1]


def waverec(coeffs: list[np.ndarray]) -> np.ndarray:
    approx = coeffs[0]
    for detail in coeffs[1:]:
        if len(approx) == len(detail) + 1:
            approx = approx[:-1]
        approx = _idwt(approx, detail)
    return approx


def soft_threshold(w: np.ndarray, lam: float) -> np.ndarray:
    return np.sign(w) * np.maximum(np.abs(w) - lam, 0.0)


def universal_threshold(coeffs: list[np.ndarray], n: int) -> float:
    """sigma * sqrt(2 log n), sigma = MAD of the deepest detail band / 0.6745."""
    deepest = coeffs[1]
    sigma = np.median(np.abs(deepest - np.median(deepest))) / MAD_SCALE
    return float(sigma * np.sqrt(2.0 * np.log(n)))


def wavelet_denoise(x, level: int = WAVELET_LEVEL, threshold: bool = True) -> np.ndarray:
    """Soft-threshold every detail band with one universal threshold."""
    x = np.asarray(x, dtype=np.float64)
    coeffs = wavedec(x, level)
    if threshold:
        lam = universal_threshold(coeffs, len(x))
        coeffs = [coeffs[0]] + [soft_threshold(d, lam) for d in coeffs[1:]]
    return waverec(coeffs)[: len(x)]


def preprocess_window(window) -> np.ndarray:
    """201-sample raw window -> 128-sample beat in [0, 1]."""
    beat = wavelet_denoise(fourier_resample(minmax_normalize(window), BEAT_LENGTH))
    return np.clip(beat, 0.0, 1.0)


# ---------------------------------------------------------------------------
# Dataset assembly
# ---------------------------------------------------------------------------

@dataclass
class ExtractionStats:
    records: list[str] = field(default_factory=list)
    missing: list[str] = field(default_factory=list)
    degenerate: int = 0


def extract_beats(record: wfdb.WfdbRecord, annotations, channel: int = 0) -> tuple[list[Beat], int]:
    """Preprocessed beats of one record and the number of discarded constant windows."""
    signal = record.signals[:, channel].astype(np.float64)
    beats, degenerate = [], 0
    for window, label, r in segment_beats(signal, annotations):
        try:
            samples = preprocess_window(window)
        except DegenerateWindow:
            degenerate += 1
            continue
        beats.append(Beat(samples, label, record.name, r))
    if degenerate:
        log.warning("record %s: %d constant windows discarded", record.name, degenerate)
    return beats, degenerate


def load_beats(directory, names=None) -> tuple[list[Beat], ExtractionStats]:
    available = wfdb.list_records(directory)
    wanted = select_records(names if names is not None else available)
    stats = ExtractionStats()
    beats: list[Beat] = []
    for name in wanted:
        if name not in available:
            stats.missing.append(name)
            continue
        record, annotations = wfdb.read_record(directory, name)
        got, degenerate = extract_beats(record, annotations)
        beats += got
        stats.degenerate += degenerate
        stats.records.append(name)
    return beats, stats


def build_dataset(beats: list[Beat], seed: int, pool_sizes: dict[str, int] | None = None) -> BeatDataset:
    """Random per-class pools of the requested sizes, split 50/50 into train/test."""
    pool_sizes = POOL_SIZES if pool_sizes is None else pool_sizes
    rng = np.random.default_rng(seed)
    train, test = [], []
    for name in CLASSES:
        size = pool_sizes.get(name, 0)
        members = [b for b in beats if b.label == CLASS_INDEX[name]]
        if len(members) < size:
            raise DatasetError(f"class {name}: need {size} beats, only {len(members)} available")
        chosen = rng.choice(len(members), size=size, replace=False)
        half = size // 2
        train += [members[i] for i in chosen[:half]]
        test += [members[i] for i in chosen[half:]]
    return BeatDataset(train, test)


# ---------------------------------------------------------------------------
# Binary cache
# ---------------------------------------------------------------------------

CACHE_MAGIC = b"BEAT"
CACHE_VERSION = 1


def save_cache(path, dataset: BeatDataset) -> None:
    """``BEAT``, version u16, train count u32, test count u32, then per beat
    128 float32 samples and one label byte (train beats first)."""
    parts = [CACHE_MAGIC, struct.pack("<HII", CACHE_VERSION, len(dataset.train), len(dataset.test))]
    for beat in dataset.train + dataset.test:
        parts.append(np.asarray(beat.samples, dtype="<f4").tobytes())
        parts.append(bytes([beat.label]))
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_cache(path) -> BeatDataset:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != CACHE_MAGIC:
        raise DatasetError(f"{path}: not a beat cache")
    version, n_train, n_test = struct.unpack_from("<HII", data, 4)
    if version != CACHE_VERSION:
        raise DatasetError(f"{path}: unsupported cache version {version}")
    record = 4 * BEAT_LENGTH + 1
    body = data[14:]
    if len(body) != record * (n_train + n_test):
        raise DatasetError(f"{path}: expected {n_train + n_test} beats, file size disagrees")
    rows = np.frombuffer(body, dtype=np.uint8).reshape(-1, record)
    samples = rows[:, :-1].copy().view("<f4").astype(np.float64)
    labels = rows[:, -1]
    beats = [Beat(samples[i], int(labels[i]), "cache") for i in range(len(rows))]
    return BeatDataset(beats[:n_train], beats[n_train:])


# ---------------------------------------------------------------------------
# Synthetic beats
# ---------------------------------------------------------------------------

# (centre, width, amplitude) of P, Q, R, S, T bumps on a 128-sample grid
_MORPHOLOGY = {
    "N": [(34, 4.0, 0.15), (58, 1.8, -0.12), (64, 2.2, 1.0), (70, 1.8, -0.20), (96, 7.0, 0.30)],
    "L": [(34, 4.0, 0.15), (58, 3.0, -0.05), (66, 5.5, 0.90), (76, 3.0, -0.10), (100, 8.0, -0.25)],
    "R": [(34, 4.0, 0.15), (58, 1.8, -0.10), (62, 2.2, 0.80), (68, 2.0, -0.35), (73, 2.4, 0.55), (98, 7.0, 0.20)],
    "A": [(20, 3.0, 0.18), (58, 1.8, -0.12), (64, 2.2, 1.0), (70, 1.8, -0.20), (92, 7.0, 0.28)],
    "V": [(58, 7.0, -0.35), (66, 7.5, 1.0), (84, 8.0, -0.55), (108, 9.0, -0.15)],
}


def synthetic_beat(label: int, rng: np.random.Generator, noise: float = 0.03) -> np.ndarray:
    """One normalised beat of class ``label`` with jittered morphology and noise."""
    t = np.arange(BEAT_LENGTH, dtype=np.float64)
    shift = rng.normal(0.0, 1.5)
    x = np.zeros(BEAT_LENGTH)
    for centre, width, amp in _MORPHOLOGY[CLASSES[label]]:
        c = centre + shift + rng.normal(0.0, 1.0)
        w = width * rng.uniform(0.85, 1.15)
        a = amp * rng.uniform(0.8, 1.2)
        x += a * np.exp(-0.5 * ((t - c) / w) ** 2)
    x += rng.uniform(-0.05, 0.05) * (t / BEAT_LENGTH)
    x += rng.normal(0.0, noise, BEAT_LENGTH)
    return minmax_normalize(x)


def generate_synthetic(n_per_class: int, seed: int, noise: float = 0.03) -> BeatDataset:
    """Class-balanced synthetic beats: ``n_per_class`` per class in each split."""
    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1")
    rng = np.random.default_rng(seed)
    splits: list[list[Beat]] = [[], []]
    for split in splits:
        for _ in range(n_per_class):
            for label in range(len(CLASSES)):
                split.append(Beat(synthetic_beat(label, rng, noise), label, "synthetic"))
    return BeatDataset(*splits)


def dataset_root(explicit: str | None = None) -> str | None:
    return explicit or os.environ.get("SPLITECG_DATA")
