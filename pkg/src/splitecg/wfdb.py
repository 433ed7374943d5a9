"""Minimal WFDB reader: text headers, format-212 signals, MIT annotation files."""

from __future__ import annotations

import os
import re
from dataclasses import dataclass, field

import numpy as np


class ParseError(ValueError):
    def __init__(self, message: str, offset: int | None = None):
        where = f" at byte {offset}" if offset is not None else ""
        super().__init__(message + where)
        self.offset = offset


# MIT annotation codes (WFDB ecgcodes.h)
ANNOTATION_SYMBOLS = {
    0: " ", 1: "N", 2: "L", 3: "R", 4: "a", 5: "V", 6: "F", 7: "J", 8: "A", 9: "S",
    10: "E", 11: "j", 12: "/", 13: "Q", 14: "~", 16: "|", 18: "s", 19: "T", 20: "*",
    21: "D", 22: '"', 23: "=", 24: "p", 25: "B", 26: "^", 27: "t", 28: "+", 29: "u",
    30: "?", 31: "!", 32: "[", 33: "]", 34: "e", 35: "n", 36: "@", 37: "x", 38: "f",
    39: "(", 40: ")", 41: "r",
}
SYMBOL_CODES = {sym: code for code, sym in ANNOTATION_SYMBOLS.items()}
BEAT_SYMBOLS = frozenset("NLRaVFJASEj/QenfB?r")

SKIP, NUM, SUB, CHAN, AUX = 59, 60, 61, 62, 63


@dataclass
class SignalSpec:
    file_name: str
    fmt: int
    gain: float
    baseline: int
    units: str
    adc_resolution: int
    adc_zero: int
    initial_value: int
    checksum: int
    description: str


@dataclass
class WfdbRecord:
    name: str
    fs: float
    signals: np.ndarray            # (n_samples, n_signals), ADC units
    channels: list[str]
    gains: list[float]
    baselines: list[int]

    def physical(self, channel: int = 0) -> np.ndarray:
        return (self.signals[:, channel] - self.baselines[channel]) / self.gains[channel]


@dataclass
class Annotation:
    sample: int
    code: int
    subtype: int = 0
    chan: int = 0
    num: int = 0
    aux: str = ""

    @property
    def symbol(self) -> str:
        return ANNOTATION_SYMBOLS.get(self.code, "?")


@dataclass
class Header:
    name: str
    n_signals: int
    fs: float
    n_samples: int
    signals: list[SignalSpec] = field(default_factory=list)


_NUMBER = re.compile(r"[-+]?(\d+\.?\d*|\.\d+)([eE][-+]?\d+)?")


def _leading_number(text: str) -> str:
    match = _NUMBER.match(text)
    if match is None:
        raise ParseError(f"expected a number in {text!r}")
    return match.group(0)


def parse_header(text: str) -> Header:
    lines = [ln.strip() for ln in text.splitlines() if ln.strip() and not ln.lstrip().startswith("#")]
    if not lines:
        raise ParseError("empty header")
    first = lines[0].split()
    if len(first) < 2:
        raise ParseError("record line needs a name and signal count")
    name = first[0].split("/")[0]
    n_signals = int(first[1])
    fs = float(_leading_number(first[2])) if len(first) > 2 else 250.0
    n_samples = int(first[3]) if len(first) > 3 else 0
    header = Header(name, n_signals, fs, n_samples)
    if len(lines) < 1 + n_signals:
        raise ParseError(f"header declares {n_signals} signals but lists {len(lines) - 1}")
    for line in lines[1:1 + n_signals]:
        parts = line.split()
        if len(parts) < 2:
            raise ParseError(f"bad signal line {line!r}")
        fmt = int(_leading_number(parts[1]))
        gain, baseline, units = 200.0, None, "mV"
        adc_res, adc_zero, init, checksum = 12, 0, 0, 0
        if len(parts) > 2:
            g = parts[2]
            if "/" in g:
                g, units = g.split("/", 1)
            if "(" in g:
                g, base = g.split("(", 1)
                baseline = int(base.rstrip(")"))
            gain = float(g) or 200.0
        if len(parts) > 3:
            adc_res = int(parts[3])
        if len(parts) > 4:
            adc_zero = int(parts[4])
        if len(parts) > 5:
            init = int(parts[5])
        if len(parts) > 6:
            checksum = int(parts[6])
        description = " ".join(parts[8:]) if len(parts) > 8 else ""
        header.signals.append(SignalSpec(
            parts[0], fmt, gain, adc_zero if baseline is None else baseline, units,
            adc_res, adc_zero, init, checksum, description))
    return header


def unpack_212(data: bytes, n_signals: int = 1) -> np.ndarray:
    """Decode format 212: two 12-bit two's-complement samples per 3 bytes.

    Byte 0 holds the low 8 bits of the first sample, the low nibble of byte 1
    its high 4 bits; the high nibble of byte 1 and byte 2 form the second.
    Returns an array shaped (n_samples, n_signals).
    """
    raw = np.frombuffer(data, dtype=np.uint8)
    n_values = (len(raw) * 2) // 3
    groups = raw[: (len(raw) // 3) * 3].reshape(-1, 3).astype(np.int32)
    first = groups[:, 0] | ((groups[:, 1] & 0x0F) << 8)
    second = groups[:, 2] | ((groups[:, 1] & 0xF0) << 4)
    values = np.empty(2 * len(groups) + (1 if n_values % 2 else 0), dtype=np.int32)
    values[0:2 * len(groups):2] = first
    values[1:2 * len(groups):2] = second
    if n_values % 2:
        values[-1] = raw[-2] | ((raw[-1] & 0x0F) << 8)
    values[values > 2047] -= 4096
    n_samples = len(values) // n_signals
    return values[: n_samples * n_signals].reshape(n_samples, n_signals)


def pack_212(samples) -> bytes:
    """Inverse of :func:`unpack_212` for a flat, frame-interleaved sequence."""
    v = np.asarray(samples, dtype=np.int64).ravel()
    if ((v < -2048) | (v > 2047)).any():
        raise ValueError("format 212 holds 12-bit values in [-2048, 2047]")
    v = v & 0xFFF
    odd = len(v) % 2
    pairs = v[: len(v) - odd].reshape(-1, 2)
    out = np.empty((len(pairs), 3), dtype=np.uint8)
    out[:, 0] = pairs[:, 0] & 0xFF
    out[:, 1] = ((pairs[:, 0] >> 8) & 0x0F) | (((pairs[:, 1] >> 8) & 0x0F) << 4)
    out[:, 2] = pairs[:, 1] & 0xFF
    tail = b""
    if odd:
        tail = bytes([v[-1] & 0xFF, (v[-1] >> 8) & 0x0F])
    return out.tobytes() + tail


def parse_annotations(data: bytes) -> list[Annotation]:
    """Decode an MIT-format annotation file.

    Each 16-bit little-endian word carries a 6-bit type in its top bits and a
    10-bit field below.  SKIP carries a 32-bit interval in the next two words
    (high word first); NUM, SUB, CHAN and AUX modify the preceding annotation.
    """
    if len(data) % 2:
        raise ParseError("annotation file has odd length", len(data) - 1)
    words = np.frombuffer(data, dtype="<u2")
    annotations: list[Annotation] = []
    t = 0
    pending_skip = 0
    num = chan = 0
    i = 0
    n = len(words)
    while i < n:
        offset = 2 * i
        word = int(words[i])
        code, value = word >> 10, word & 0x3FF
        if code == 0 and value == 0:
            break
        if code == SKIP:
            if i + 2 >= n:
                raise ParseError("SKIP without interval", offset)
            hi, lo = int(words[i + 1]), int(words[i + 2])
            interval = (hi << 16) | lo
            if interval >= 1 << 31:
                interval -= 1 << 32
            pending_skip += interval
            i += 3
            continue
        if code == NUM:
            if not annotations:
                raise ParseError("NUM before any annotation", offset)
            num = value
            annotations[-1].num = num
        elif code == SUB:
            if not annotations:
                raise ParseError("SUB before any annotation", offset)
            annotations[-1].subtype = value
        elif code == CHAN:
            if not annotations:
                raise ParseError("CHAN before any annotation", offset)
            chan = value
            annotations[-1].chan = chan
        elif code == AUX:
            if not annotations:
                raise ParseError("AUX before any annotation", offset)
            nbytes = value
            start = offset + 2
            if start + nbytes > len(data):
                raise ParseError("AUX string runs past end of file", offset)
            annotations[-1].aux = data[start:start + nbytes].decode("latin-1").rstrip("\x00")
            i += 1 + (nbytes + 1) // 2
            continue
        else:
            t += pending_skip + value
            pending_skip = 0
            if annotations and t < annotations[-1].sample:
                raise ParseError(f"annotation time {t} goes backwards", offset)
            if t < 0:
                raise ParseError(f"negative annotation time {t}", offset)
            annotations.append(Annotation(t, code, chan=chan, num=num))
        i += 1
    return annotations


def encode_annotations(annotations: list[Annotation]) -> bytes:
    """Write annotations in MIT format (SKIP for long gaps, AUX strings kept)."""
    words: list[int] = []
    t = 0
    for ann in annotations:
        delta = ann.sample - t
        if delta < 0:
            raise ValueError("annotations must be sorted")
        if delta > 1023:
            words += [SKIP << 10, (delta >> 16) & 0xFFFF, delta & 0xFFFF]
            delta = 0
        words.append((ann.code << 10) | delta)
        if ann.subtype:
            words.append((SUB << 10) | ann.subtype)
        if ann.aux:
            raw = ann.aux.encode("latin-1")
            words.append((AUX << 10) | len(raw))
            padded = raw + b"\x00" * (len(raw) % 2)
            words += list(np.frombuffer(padded, dtype="<u2"))
        t = ann.sample
    words.append(0)
    return np.asarray(words, dtype="<u2").tobytes()


def parse_wfdb(header_bytes: bytes, signal_bytes: bytes, annotation_bytes: bytes | None = None):
    """Decode one record from the raw contents of its .hea, .dat and .atr files."""
    header = parse_header(header_bytes.decode("ascii", errors="replace"))
    if not header.signals:
        raise ParseError("header lists no signals")
    for spec in header.signals:
        if spec.fmt != 212:
            raise ParseError(f"unsupported signal format {spec.fmt}")
    signals = unpack_212(signal_bytes, header.n_signals)
    if header.n_samples and len(signals) < header.n_samples:
        raise ParseError(f"signal file holds {len(signals)} of {header.n_samples} samples",
                         len(signal_bytes))
    if header.n_samples:
        signals = signals[: header.n_samples]
    record = WfdbRecord(
        name=header.name,
        fs=header.fs,
        signals=signals,
        channels=[s.description for s in header.signals],
        gains=[s.gain for s in header.signals],
        baselines=[s.baseline for s in header.signals],
    )
    annotations = parse_annotations(annotation_bytes) if annotation_bytes else []
    return record, annotations


def read_record(directory, name: str, annotator: str = "atr"):
    """Read ``name.hea``, its signal file and ``name.<annotator>`` from ``directory``."""
    with open(os.path.join(directory, f"{name}.hea"), "rb") as fh:
        header_bytes = fh.read()
    header = parse_header(header_bytes.decode("ascii", errors="replace"))
    with open(os.path.join(directory, header.signals[0].file_name), "rb") as fh:
        signal_bytes = fh.read()
    ann_path = os.path.join(directory, f"{name}.{annotator}")
    ann_bytes = None
    if os.path.exists(ann_path):
        with open(ann_path, "rb") as fh:
            ann_bytes = fh.read()
    return parse_wfdb(header_bytes, signal_bytes, ann_bytes)


def list_records(directory) -> list[str]:
    return sorted(f[:-4] for f in os.listdir(directory) if f.endswith(".hea"))
