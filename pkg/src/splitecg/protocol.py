"""Binary framing for the client/server link and the checkpoint file format.

Frame layout (little-endian)::

    [length: u32][type: u8][payload]      length = 1 + len(payload)

Tensor payloads are ``batch_index u32, ndims u32, dims u32 * ndims`` followed
by the values as float32 (normal mode) or float64 (exact mode).  The value
width is implied by the byte count, so decoding needs no session state.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import BinaryIO, Union

import numpy as np

HELLO = 0x01
CLIENT_META = 0x02
ACTIVATION = 0x03
GRADIENT = 0x04
END = 0x05
EVAL = 0x06
PREDICTIONS = 0x07
ERROR = 0x7F

# ERROR frame codes
E_TRUNCATED = 0x0001
E_UNKNOWN_TYPE = 0x0002
E_BAD_LENGTH = 0x0003
E_BAD_PAYLOAD = 0x0004
E_OUT_OF_ORDER = 0x0005
E_DIMS_MISMATCH = 0x0006
E_INTERNAL = 0x00FF

MAX_FRAME = 1 << 28
MAX_DIMS = 8

_U32 = struct.Struct("<I")
_HELLO = struct.Struct("<QdBIB")
_META = struct.Struct("<II")


class DecodeError(ValueError):
    """A frame could not be decoded.

    ``resume_at`` is the offset just past the bad frame's length field, where
    a reader may resynchronise if it chooses to.
    """

    def __init__(self, code: int, message: str, offset: int = 0, resume_at: int | None = None):
        super().__init__(f"{message} (offset {offset})")
        self.code = code
        self.offset = offset
        self.resume_at = resume_at


class ConnectionClosed(EOFError):
    """The peer closed the stream cleanly on a frame boundary."""


# ---------------------------------------------------------------------------
# Messages
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Hello:
    seed: int
    learning_rate: float
    optimizer: int
    batch_size: int
    exact: bool = False

    type_code = HELLO


@dataclass(frozen=True)
class ClientMeta:
    total_batches: int
    epochs: int

    type_code = CLIENT_META


@dataclass(frozen=True, eq=False)
class Activation:
    batch_index: int
    values: np.ndarray
    labels: np.ndarray

    type_code = ACTIVATION

    def __eq__(self, other):
        return (type(other) is type(self) and self.batch_index == other.batch_index
                and _same_array(self.values, other.values) and _same_array(self.labels, other.labels))


@dataclass(frozen=True, eq=False)
class Gradient:
    batch_index: int
    values: np.ndarray

    type_code = GRADIENT

    def __eq__(self, other):
        return (type(other) is type(self) and self.batch_index == other.batch_index
                and _same_array(self.values, other.values))


@dataclass(frozen=True, eq=False)
class Eval:
    """Activations for inference only; the server replies with predictions."""

    batch_index: int
    values: np.ndarray

    type_code = EVAL

    def __eq__(self, other):
        return (type(other) is type(self) and self.batch_index == other.batch_index
                and _same_array(self.values, other.values))


@dataclass(frozen=True, eq=False)
class Predictions:
    batch_index: int
    classes: np.ndarray

    type_code = PREDICTIONS

    def __eq__(self, other):
        return (type(other) is type(self) and self.batch_index == other.batch_index
                and _same_array(self.classes, other.classes))


@dataclass(frozen=True)
class End:
    type_code = END


@dataclass(frozen=True)
class Error:
    code: int
    text: str = ""

    type_code = ERROR


Message = Union[Hello, ClientMeta, Activation, Gradient, Eval, Predictions, End, Error]


def _same_array(a: np.ndarray, b: np.ndarray) -> bool:
    return a.dtype == b.dtype and a.shape == b.shape and a.tobytes() == b.tobytes()


# ---------------------------------------------------------------------------
# Encoding
# ---------------------------------------------------------------------------

def _tensor_bytes(batch_index: int, values: np.ndarray) -> bytes:
    if values.dtype not in (np.float32, np.float64):
        raise TypeError(f"tensor payload must be float32 or float64, got {values.dtype}")
    if not 1 <= values.ndim <= MAX_DIMS:
        raise ValueError(f"tensor payload needs 1..{MAX_DIMS} dims")
    head = struct.pack(f"<II{values.ndim}I", batch_index, values.ndim, *values.shape)
    return head + values.astype(values.dtype.newbyteorder("<"), copy=False).tobytes()


def encode_message(msg: Message) -> bytes:
    if isinstance(msg, Hello):
        payload = _HELLO.pack(msg.seed, msg.learning_rate, msg.optimizer, msg.batch_size, int(msg.exact))
    elif isinstance(msg, ClientMeta):
        payload = _META.pack(msg.total_batches, msg.epochs)
    elif isinstance(msg, Activation):
        labels = np.asarray(msg.labels, dtype=np.uint8)
        if labels.shape != (msg.values.shape[0],):
            raise ValueError("one label per sample required")
        payload = _tensor_bytes(msg.batch_index, msg.values) + labels.tobytes()
    elif isinstance(msg, (Gradient, Eval)):
        payload = _tensor_bytes(msg.batch_index, msg.values)
    elif isinstance(msg, Predictions):
        payload = _U32.pack(msg.batch_index) + np.asarray(msg.classes, dtype=np.uint8).tobytes()
    elif isinstance(msg, End):
        payload = b""
    elif isinstance(msg, Error):
        payload = struct.pack("<H", msg.code) + msg.text.encode("utf-8")
    else:
        raise TypeError(f"not a protocol message: {msg!r}")
    return _U32.pack(1 + len(payload)) + bytes([msg.type_code]) + payload


# ---------------------------------------------------------------------------
# Decoding
# ---------------------------------------------------------------------------

def _decode_tensor(payload: bytes, offset: int, extra_per_row: int):
    """Parse a tensor payload; returns (batch_index, values, trailing bytes)."""
    if len(payload) < 8:
        raise DecodeError(E_BAD_PAYLOAD, "tensor header truncated", offset)
    batch_index, ndims = struct.unpack_from("<II", payload)
    if not 1 <= ndims <= MAX_DIMS:
        raise DecodeError(E_BAD_PAYLOAD, f"bad dimension count {ndims}", offset)
    head = 8 + 4 * ndims
    if len(payload) < head:
        raise DecodeError(E_BAD_PAYLOAD, "dims truncated", offset)
    dims = struct.unpack_from(f"<{ndims}I", payload, 8)
    count = 1
    for d in dims:
        count *= d
        if count * 4 > MAX_FRAME:
            raise DecodeError(E_BAD_PAYLOAD, "dims overflow", offset)
    body = len(payload) - head - extra_per_row * dims[0]
    if count and body == 4 * count:
        dtype = np.dtype("<f4")
    elif count and body == 8 * count:
        dtype = np.dtype("<f8")
    elif count == 0 and body == 0:
        dtype = np.dtype("<f4")
    else:
        raise DecodeError(E_BAD_PAYLOAD, f"payload of {body} bytes does not hold {count} values", offset)
    values = np.frombuffer(payload, dtype=dtype, count=count, offset=head).reshape(dims)
    values = values.astype(dtype.newbyteorder("="))
    return batch_index, values, payload[head + body:]


def _decode_payload(kind: int, payload: bytes, offset: int) -> Message:
    if kind == HELLO:
        if len(payload) != _HELLO.size:
            raise DecodeError(E_BAD_PAYLOAD, "HELLO payload size", offset)
        seed, lr, opt, batch, exact = _HELLO.unpack(payload)
        return Hello(seed, lr, opt, batch, bool(exact))
    if kind == CLIENT_META:
        if len(payload) != _META.size:
            raise DecodeError(E_BAD_PAYLOAD, "CLIENT_META payload size", offset)
        return ClientMeta(*_META.unpack(payload))
    if kind == ACTIVATION:
        index, values, rest = _decode_tensor(payload, offset, extra_per_row=1)
        return Activation(index, values, np.frombuffer(rest, dtype=np.uint8).copy())
    if kind == GRADIENT:
        index, values, _ = _decode_tensor(payload, offset, extra_per_row=0)
        return Gradient(index, values)
    if kind == EVAL:
        index, values, _ = _decode_tensor(payload, offset, extra_per_row=0)
        return Eval(index, values)
    if kind == PREDICTIONS:
        if len(payload) < 4:
            raise DecodeError(E_BAD_PAYLOAD, "PREDICTIONS payload size", offset)
        return Predictions(_U32.unpack_from(payload)[0], np.frombuffer(payload[4:], dtype=np.uint8).copy())
    if kind == END:
        if payload:
            raise DecodeError(E_BAD_PAYLOAD, "END carries no payload", offset)
        return End()
    if kind == ERROR:
        if len(payload) < 2:
            raise DecodeError(E_BAD_PAYLOAD, "ERROR payload size", offset)
        (code,) = struct.unpack_from("<H", payload)
        return Error(code, payload[2:].decode("utf-8", errors="replace"))
    raise DecodeError(E_UNKNOWN_TYPE, f"unknown frame type 0x{kind:02x}", offset)


def _check_length(length: int, offset: int) -> None:
    if length == 0 or length > MAX_FRAME:
        raise DecodeError(E_BAD_LENGTH, f"bad frame length {length}", offset, resume_at=offset + 4)


def decode_frame(buf: bytes, offset: int = 0) -> tuple[Message, int]:
    """Decode the frame starting at ``offset``; returns (message, next offset)."""
    if len(buf) - offset < 4:
        raise DecodeError(E_TRUNCATED, "length field truncated", offset)
    (length,) = _U32.unpack_from(buf, offset)
    _check_length(length, offset)
    end = offset + 4 + length
    if len(buf) < end:
        raise DecodeError(E_TRUNCATED, f"frame needs {length} bytes, {len(buf) - offset - 4} present", offset)
    try:
        msg = _decode_payload(buf[offset + 4], bytes(buf[offset + 5:end]), offset)
    except DecodeError as exc:
        exc.resume_at = end
        raise
    return msg, end


def decode_message(buf: bytes) -> Message:
    """Decode exactly one frame; trailing bytes are an error."""
    msg, end = decode_frame(buf)
    if end != len(buf):
        raise DecodeError(E_BAD_LENGTH, f"{len(buf) - end} trailing bytes after frame", end)
    return msg


def _read_exact(stream: BinaryIO, n: int) -> bytes:
    chunks = []
    remaining = n
    while remaining:
        chunk = stream.read(remaining)
        if not chunk:
            break
        chunks.append(chunk)
        remaining -= len(chunk)
    return b"".join(chunks)


def read_message(stream: BinaryIO) -> Message:
    """Read one frame from a binary stream (e.g. ``socket.makefile('rb')``)."""
    header = _read_exact(stream, 4)
    if not header:
        raise ConnectionClosed("peer closed the connection")
    if len(header) < 4:
        raise DecodeError(E_TRUNCATED, "length field truncated")
    (length,) = _U32.unpack(header)
    _check_length(length, 0)
    body = _read_exact(stream, length)
    if len(body) < length:
        raise DecodeError(E_TRUNCATED, f"frame needs {length} bytes, got {len(body)}")
    return _decode_payload(body[0], body[1:], 0)


def write_message(stream: BinaryIO, msg: Message) -> None:
    stream.write(encode_message(msg))
    stream.flush()


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"SPL1"
CHECKPOINT_VERSION = 1


def _blob(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr, dtype="<f8")
    body = struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape) + arr.tobytes()
    return _U32.pack(len(body)) + body


def save_checkpoint(path, params: list[np.ndarray], epoch: int = 0, adam=None) -> None:
    """Write parameters (and optionally Adam moments) in layer order.

    Layout: magic, version u16, epoch u32, adam step u64, has-adam u8,
    blob count u32, then length-prefixed blobs ``ndim u8, dims u32..., f64...``.
    """
    blobs = list(params)
    step = 0
    if adam is not None:
        blobs += list(adam.m) + list(adam.v)
        step = adam.step
    out = [CHECKPOINT_MAGIC, struct.pack("<HIQBI", CHECKPOINT_VERSION, epoch, step,
                                         int(adam is not None), len(blobs))]
    out += [_blob(b) for b in blobs]
    with open(path, "wb") as fh:
        fh.write(b"".join(out))


@dataclass
class Checkpoint:
    params: list[np.ndarray]
    epoch: int
    adam_step: int
    adam_m: list[np.ndarray] | None
    adam_v: list[np.ndarray] | None


class CheckpointError(ValueError):
    pass


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    head = struct.Struct("<HIQBI")
    if len(data) < 4 + head.size:
        raise CheckpointError(f"{path}: truncated header")
    version, epoch, step, has_adam, count = head.unpack_from(data, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    pos = 4 + head.size
    blobs = []
    for _ in range(count):
        if pos + 4 > len(data):
            raise CheckpointError(f"{path}: truncated blob table")
        (size,) = _U32.unpack_from(data, pos)
        body = data[pos + 4: pos + 4 + size]
        if len(body) != size or size < 1:
            raise CheckpointError(f"{path}: truncated blob")
        ndim = body[0]
        dims = struct.unpack_from(f"<{ndim}I", body, 1)
        values = np.frombuffer(body, dtype="<f8", offset=1 + 4 * ndim)
        if values.size != int(np.prod(dims)):
            raise CheckpointError(f"{path}: blob size does not match dims {dims}")
        blobs.append(values.reshape(dims).astype(np.float64))
        pos += 4 + size
    if has_adam:
        if count % 3:
            raise CheckpointError(f"{path}: inconsistent optimizer state")
        n = count // 3
        return Checkpoint(blobs[:n], epoch, step, blobs[n:2 * n], blobs[2 * n:])
    return Checkpoint(blobs, epoch, step, None, None)
