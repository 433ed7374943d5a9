"""Networked split training: one server (layers l+1..L), one client (1..l).

Both sides run the same per-batch arithmetic as :mod:`splitecg.training`,
so an exact-mode session reproduces in-process training bit for bit.
"""

from __future__ import annotations

import logging
import os
import socket
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import model as M
from . import protocol as P
from . import training as Tr
from .tensor import AdamState

log = logging.getLogger(__name__)

EVAL_CHUNK = 256
SERVER_CHECKPOINT = "server.ckpt"
CLIENT_CHECKPOINT = "client.ckpt"


class ProtocolError(RuntimeError):
    def __init__(self, message: str, code: int = P.E_INTERNAL):
        super().__init__(message)
        self.code = code


class RemoteError(ProtocolError):
    """The peer sent an ERROR frame."""


class SessionAborted(RuntimeError):
    """The connection dropped; ``checkpoint`` names the last resumable state."""

    def __init__(self, message: str, checkpoint: str | None):
        super().__init__(message)
        self.checkpoint = checkpoint


@dataclass(frozen=True)
class TraceEvent:
    direction: str          # "send" or "recv"
    kind: int
    batch_index: int | None
    epoch: int
    shape: tuple[int, ...] | None = None


class Channel:
    """Blocking framed message link over a connected socket, with a trace."""

    def __init__(self, sock: socket.socket):
        self.sock = sock
        self.rfile = sock.makefile("rb")
        self.wfile = sock.makefile("wb")
        self.trace: list[TraceEvent] = []
        self.epoch = 0

    def _note(self, direction: str, msg) -> None:
        values = getattr(msg, "values", None)
        self.trace.append(TraceEvent(direction, msg.type_code, getattr(msg, "batch_index", None),
                                     self.epoch, None if values is None else tuple(values.shape)))

    def send(self, msg) -> None:
        P.write_message(self.wfile, msg)
        self._note("send", msg)

    def recv(self):
        msg = P.read_message(self.rfile)
        self._note("recv", msg)
        if isinstance(msg, P.Error):
            raise RemoteError(f"peer error 0x{msg.code:04x}: {msg.text}", msg.code)
        return msg

    def fail(self, code: int, text: str) -> None:
        try:
            self.send(P.Error(code, text))
        except OSError:
            pass

    def close(self) -> None:
        for f in (self.rfile, self.wfile):
            try:
                f.close()
            except OSError:
                pass
        try:
            self.sock.close()
        except OSError:
            pass


def check_lockstep(trace: list[TraceEvent], role: str = "client") -> None:
    """Raise ``ProtocolError`` unless every ACTIVATION is answered by its GRADIENT
    (and every EVAL by PREDICTIONS) before anything else is sent, with batch
    indices strictly increasing within an epoch."""
    out_dir, in_dir = ("send", "recv") if role == "client" else ("recv", "send")
    pending = None
    last_index: dict[int, int] = {}
    answer = {P.ACTIVATION: P.GRADIENT, P.EVAL: P.PREDICTIONS}
    for i, ev in enumerate(trace):
        if ev.direction == out_dir and ev.kind in answer:
            if pending is not None:
                raise ProtocolError(f"event {i}: second request while batch {pending.batch_index} is in flight")
            if ev.kind == P.ACTIVATION:
                prev = last_index.get(ev.epoch, -1)
                if ev.batch_index <= prev:
                    raise ProtocolError(f"event {i}: batch index {ev.batch_index} after {prev}")
                last_index[ev.epoch] = ev.batch_index
            pending = ev
        elif ev.direction == in_dir and ev.kind in answer.values():
            if pending is None or answer[pending.kind] != ev.kind or pending.batch_index != ev.batch_index:
                raise ProtocolError(f"event {i}: unexpected reply {ev.kind:#04x} for batch {ev.batch_index}")
            if ev.kind == P.GRADIENT and ev.shape != pending.shape:
                raise ProtocolError(f"event {i}: gradient dims {ev.shape} != activation dims {pending.shape}")
            pending = None
        elif ev.direction == out_dir and ev.kind == P.END and pending is not None:
            raise ProtocolError(f"event {i}: END while batch {pending.batch_index} is in flight")
    if pending is not None:
        raise ProtocolError("trace ends with a request in flight")


def _parse_addr(addr) -> tuple[str, int]:
    if isinstance(addr, tuple):
        return addr
    host, _, port = str(addr).rpartition(":")
    return (host or "127.0.0.1", int(port))


def _load_state(path: str, part: M.ModelPart, adam: AdamState) -> int:
    ckpt = P.load_checkpoint(path)
    params = part.parameters()
    if len(ckpt.params) != len(params) or any(a.shape != b.shape for a, b in zip(ckpt.params, params)):
        raise P.CheckpointError(f"{path}: parameter shapes do not match the model part")
    for dst, src in zip(params, ckpt.params):
        dst[...] = src
    if ckpt.adam_m is not None:
        for dst, src in zip(adam.m, ckpt.adam_m):
            dst[...] = src
        for dst, src in zip(adam.v, ckpt.adam_v):
            dst[...] = src
        adam.step = ckpt.adam_step
    return ckpt.epoch


# ---------------------------------------------------------------------------
# Server
# ---------------------------------------------------------------------------

@dataclass
class ServerResult:
    part: M.ModelPart
    history: list[Tr.EpochLog] = field(default_factory=list)
    trace: list[TraceEvent] = field(default_factory=list)
    batches: int = 0
    epochs: int = 0


def run_server(listen, config: M.ModelConfig, sync: Tr.SyncConfig, checkpoint_dir: str | None = None,
               resume: str | None = None,
               on_epoch: Callable[[Tr.EpochLog], None] | None = None) -> ServerResult:
    """Serve one client session.

    ``listen`` is an ``(host, port)`` pair, a ``"host:port"`` string, or an
    already listening socket.
    """
    if isinstance(listen, socket.socket):
        srv, own = listen, False
    else:
        srv = socket.create_server(_parse_addr(listen))
        own = True
    try:
        conn, peer = srv.accept()
    finally:
        if own:
            srv.close()
    log.info("client connected from %s", peer)
    chan = Channel(conn)
    part = M.server_part(config, sync.seed)
    trainer = Tr.ServerTrainer(part, sync.learning_rate)
    start_epoch = _load_state(resume, part, trainer.adam) if resume else 0
    ckpt_path = os.path.join(checkpoint_dir, SERVER_CHECKPOINT) if checkpoint_dir else None
    if ckpt_path:
        P.save_checkpoint(ckpt_path, part.parameters(), start_epoch, trainer.adam)
    result = ServerResult(part, trace=chan.trace)
    split_shape = config.split_shape
    try:
        chan.send(P.Hello(sync.seed, sync.learning_rate, sync.optimizer, sync.batch_size, sync.exact))
        meta = chan.recv()
        if not isinstance(meta, P.ClientMeta):
            raise ProtocolError("expected CLIENT_META", P.E_OUT_OF_ORDER)
        if meta.total_batches < 1:
            raise ProtocolError("client announced zero batches", P.E_BAD_PAYLOAD)
        total, epochs = meta.total_batches, meta.epochs
        epoch, expected = start_epoch, 0
        chan.epoch = epoch
        losses: list[float] = []
        hits = seen = 0
        while True:
            msg = chan.recv()
            if isinstance(msg, P.Activation):
                if epoch >= start_epoch + epochs:
                    raise ProtocolError("activation after the last epoch", P.E_OUT_OF_ORDER)
                if msg.batch_index != expected:
                    raise ProtocolError(f"batch {msg.batch_index} arrived, expected {expected}", P.E_OUT_OF_ORDER)
                n = msg.values.shape[0]
                if msg.values.shape[1:] != split_shape or not 1 <= n <= sync.batch_size or len(msg.labels) != n:
                    raise ProtocolError(f"activation dims {msg.values.shape} do not match {split_shape}",
                                        P.E_DIMS_MISMATCH)
                if msg.labels.max(initial=0) >= config.num_classes:
                    raise ProtocolError("label out of range", P.E_BAD_PAYLOAD)
                labels = msg.labels.astype(np.intp)
                loss, probs, grad = trainer.step(Tr.from_wire(msg.values), labels)
                chan.send(P.Gradient(msg.batch_index, Tr.to_wire(grad, sync.exact)))
                losses.append(loss * n)
                hits += int(np.sum(np.argmax(probs, axis=-1) == labels))
                seen += n
                result.batches += 1
                expected += 1
                if expected == total:
                    entry = Tr.EpochLog(epoch, float(np.sum(losses) / seen), hits / seen)
                    result.history.append(entry)
                    if on_epoch is not None:
                        on_epoch(entry)
                    epoch += 1
                    expected, losses, hits, seen = 0, [], 0, 0
                    chan.epoch = epoch
                    if ckpt_path:
                        P.save_checkpoint(ckpt_path, part.parameters(), epoch, trainer.adam)
            elif isinstance(msg, P.Eval):
                if msg.values.shape[1:] != split_shape:
                    raise ProtocolError(f"eval dims {msg.values.shape} do not match {split_shape}",
                                        P.E_DIMS_MISMATCH)
                preds = trainer.predict(Tr.from_wire(msg.values))
                chan.send(P.Predictions(msg.batch_index, preds.astype(np.uint8)))
            elif isinstance(msg, P.End):
                if expected != 0 or epoch != start_epoch + epochs:
                    raise ProtocolError(f"END after {epoch - start_epoch} epochs / batch {expected}",
                                        P.E_OUT_OF_ORDER)
                chan.send(P.End())
                result.epochs = epoch - start_epoch
                break
            else:
                raise ProtocolError(f"unexpected frame 0x{msg.type_code:02x}", P.E_OUT_OF_ORDER)
        return result
    except P.DecodeError as exc:
        chan.fail(exc.code, str(exc))
        raise ProtocolError(f"malformed frame: {exc}", exc.code) from exc
    except RemoteError:
        raise
    except ProtocolError as exc:
        chan.fail(exc.code, str(exc))
        raise
    except (P.ConnectionClosed, OSError) as exc:
        raise SessionAborted(f"connection lost: {exc}", ckpt_path) from exc
    finally:
        chan.close()


# ---------------------------------------------------------------------------
# Client
# ---------------------------------------------------------------------------

@dataclass
class ClientResult:
    part: M.ModelPart
    sync: Tr.SyncConfig | None = None
    history: list[Tr.EpochLog] = field(default_factory=list)
    trace: list[TraceEvent] = field(default_factory=list)
    batches: int = 0
    epochs: int = 0


def _connect(addr, timeout: float) -> socket.socket:
    host, port = _parse_addr(addr)
    return socket.create_connection((host, port), timeout=timeout)


def run_client(addr, config: M.ModelConfig, train: tuple[np.ndarray, np.ndarray],
               test: tuple[np.ndarray, np.ndarray] | None, epochs: int,
               noise: Tr.NoiseFn | None = None, checkpoint_dir: str | None = None,
               resume: str | None = None, timeout: float = 600.0,
               on_epoch: Callable[[Tr.EpochLog], None] | None = None) -> ClientResult:
    """Train part A against a server; raw beats never leave this process."""
    x_train, y_train = train
    chan = Channel(_connect(addr, timeout))
    ckpt_path = os.path.join(checkpoint_dir, CLIENT_CHECKPOINT) if checkpoint_dir else None
    result = ClientResult(part=None, trace=chan.trace)  # type: ignore[arg-type]
    try:
        hello = chan.recv()
        if not isinstance(hello, P.Hello):
            raise ProtocolError("expected HELLO", P.E_OUT_OF_ORDER)
        total = Tr.num_batches(len(x_train), hello.batch_size)
        sync = Tr.SyncConfig(hello.seed, hello.learning_rate, hello.optimizer, hello.batch_size,
                             total, epochs, hello.exact)
        result.sync = sync
        part = M.client_part(config, sync.seed)
        result.part = part
        client = Tr.ClientTrainer(part, sync.learning_rate, noise)
        start_epoch = _load_state(resume, part, client.adam) if resume else 0
        if ckpt_path:
            P.save_checkpoint(ckpt_path, part.parameters(), start_epoch, client.adam)
        chan.send(P.ClientMeta(total, epochs))
        for epoch in range(start_epoch, start_epoch + epochs):
            chan.epoch = epoch
            for index, idx in enumerate(Tr.batch_indices(len(x_train), sync.batch_size, sync.seed, epoch)):
                sent = Tr.to_wire(client.forward(x_train[idx]), sync.exact)
                chan.send(P.Activation(index, sent, y_train[idx].astype(np.uint8)))
                reply = chan.recv()
                if not isinstance(reply, P.Gradient) or reply.batch_index != index:
                    raise ProtocolError("expected the gradient of the batch just sent", P.E_OUT_OF_ORDER)
                if reply.values.shape != sent.shape:
                    raise ProtocolError(f"gradient dims {reply.values.shape} != {sent.shape}",
                                        P.E_DIMS_MISMATCH)
                client.backward(Tr.from_wire(reply.values))
                result.batches += 1
            accuracy = _remote_accuracy(chan, client, test, sync.exact) if test is not None else float("nan")
            entry = Tr.EpochLog(epoch, float("nan"), float("nan"), accuracy)
            result.history.append(entry)
            if on_epoch is not None:
                on_epoch(entry)
            if ckpt_path:
                P.save_checkpoint(ckpt_path, part.parameters(), epoch + 1, client.adam)
        chan.send(P.End())
        reply = chan.recv()
        if not isinstance(reply, P.End):
            raise ProtocolError("expected END", P.E_OUT_OF_ORDER)
        result.epochs = epochs
        return result
    except P.DecodeError as exc:
        chan.fail(exc.code, str(exc))
        raise ProtocolError(f"malformed frame: {exc}", exc.code) from exc
    except RemoteError:
        raise
    except ProtocolError as exc:
        chan.fail(exc.code, str(exc))
        raise
    except (P.ConnectionClosed, OSError) as exc:
        raise SessionAborted(f"connection lost: {exc}", ckpt_path) from exc
    finally:
        chan.close()


def _remote_accuracy(chan: Channel, client: Tr.ClientTrainer, test, exact: bool) -> float:
    x, y = test
    if len(x) == 0:
        return float("nan")
    hits = 0
    for index, start in enumerate(range(0, len(x), EVAL_CHUNK)):
        xb = x[start:start + EVAL_CHUNK]
        chan.send(P.Eval(index, Tr.to_wire(client.infer(xb), exact)))
        reply = chan.recv()
        if not isinstance(reply, P.Predictions) or reply.batch_index != index or len(reply.classes) != len(xb):
            raise ProtocolError("bad PREDICTIONS reply", P.E_OUT_OF_ORDER)
        hits += int(np.sum(reply.classes.astype(np.intp) == y[start:start + EVAL_CHUNK]))
    return hits / len(x)
