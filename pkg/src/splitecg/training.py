"""Training loops shared by the in-process runs and the networked sessions."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import model as M
from .tensor import AdamState, adam_step

log = logging.getLogger(__name__)

ADAM = 0

NoiseFn = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class SyncConfig:
    """Hyper-parameters both sides agree on before the first batch."""

    seed: int = 0
    learning_rate: float = 0.001
    optimizer: int = ADAM
    batch_size: int = 32
    total_batches: int = 1
    epochs: int = 1
    exact: bool = False

    def __post_init__(self):
        if self.batch_size < 1 or self.total_batches < 1:
            raise ValueError("batch size and batch count must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning rate must be positive")
        if self.optimizer != ADAM:
            raise ValueError(f"unsupported optimizer code {self.optimizer}")


@dataclass
class EpochLog:
    epoch: int
    loss: float
    train_accuracy: float
    test_accuracy: float = float("nan")


@dataclass
class TrainResult:
    params: dict[int, list[np.ndarray]]
    history: list[EpochLog] = field(default_factory=list)

    @property
    def final_accuracy(self) -> float:
        return self.history[-1].test_accuracy if self.history else float("nan")


def num_batches(n_samples: int, batch_size: int) -> int:
    return -(-n_samples // batch_size)


def batch_indices(n_samples: int, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    """Shuffled mini-batches for one epoch; the last batch may be short."""
    order = np.random.default_rng([seed, epoch]).permutation(n_samples)
    return [order[i:i + batch_size] for i in range(0, n_samples, batch_size)]


def to_wire(values: np.ndarray, exact: bool) -> np.ndarray:
    """What the peer sees: float32 unless the session runs in exact mode."""
    return np.ascontiguousarray(values, dtype=np.float64 if exact else np.float32)


def from_wire(values: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(values, dtype=np.float64)


class ClientTrainer:
    """Layers 1..l: forward to the split, then finish backprop from dE/da(l)."""

    def __init__(self, part: M.ModelPart, lr: float, noise: NoiseFn | None = None):
        self.part = part
        self.lr = lr
        self.noise = noise
        self.adam = AdamState.zeros_like(part.parameters())

    def forward(self, x: np.ndarray) -> np.ndarray:
        a = self.part.forward(x)
        return self.noise(a) if self.noise is not None else a

    def infer(self, x: np.ndarray) -> np.ndarray:
        a = self.part.forward(x)
        self.part.clear()
        return self.noise(a) if self.noise is not None else a

    def backward(self, grad: np.ndarray) -> None:
        grads, _ = self.part.backward(grad, need_input_grad=False)
        adam_step(self.part.parameters(), grads, self.adam, self.lr)


class ServerTrainer:
    """Layers l+1..L: loss on received labels, update, return dE/da(l)."""

    def __init__(self, part: M.ModelPart, lr: float):
        self.part = part
        self.lr = lr
        self.adam = AdamState.zeros_like(part.parameters())

    def step(self, activation: np.ndarray, labels: np.ndarray):
        """Returns (loss, probs, grad wrt activation)."""
        self.part.forward(activation)
        loss, probs, grads, grad_in = self.part.loss_backward(labels)
        adam_step(self.part.parameters(), grads, self.adam, self.lr)
        return loss, probs, grad_in

    def predict(self, activation: np.ndarray) -> np.ndarray:
        probs = self.part.forward(activation)
        self.part.clear()
        return np.argmax(probs, axis=-1)


def _evaluate(predict_fn, x: np.ndarray, y: np.ndarray, batch: int = 512) -> float:
    if len(x) == 0:
        return float("nan")
    hits = 0
    for start in range(0, len(x), batch):
        hits += int(np.sum(predict_fn(x[start:start + batch]) == y[start:start + batch]))
    return hits / len(x)


def train_nonsplit(config: M.ModelConfig, train: tuple[np.ndarray, np.ndarray],
                   test: tuple[np.ndarray, np.ndarray], sync: SyncConfig,
                   on_epoch: Callable[[EpochLog, dict], None] | None = None) -> TrainResult:
    """Plain training of the whole model in one process."""
    x_train, y_train = train
    params = M.init_params(config, sync.seed)
    full = M.full_model(config, params)
    adam = AdamState.zeros_like(full.parameters())
    result = TrainResult(params)
    for epoch in range(sync.epochs):
        losses, hits = [], 0
        for idx in batch_indices(len(x_train), sync.batch_size, sync.seed, epoch):
            full.forward(x_train[idx])
            loss, probs, grads, _ = full.loss_backward(y_train[idx], need_input_grad=False)
            adam_step(full.parameters(), grads, adam, sync.learning_rate)
            losses.append(loss * len(idx))
            hits += int(np.sum(np.argmax(probs, axis=-1) == y_train[idx]))
        acc = _evaluate(lambda xb: M.predict([full], xb), *test)
        entry = EpochLog(epoch, float(np.sum(losses) / len(x_train)), hits / len(x_train), acc)
        result.history.append(entry)
        log.debug("epoch %d loss %.4f test %.4f", epoch, entry.loss, acc)
        if on_epoch is not None:
            on_epoch(entry, params)
    return result


def train_split_local(config: M.ModelConfig, train: tuple[np.ndarray, np.ndarray],
                      test: tuple[np.ndarray, np.ndarray], sync: SyncConfig,
                      noise: NoiseFn | None = None,
                      on_epoch: Callable[[EpochLog, dict], None] | None = None) -> TrainResult:
    """The split procedure with both parts in one process and no sockets.

    Values still pass through :func:`to_wire`, so float32 rounding and DP
    noise behave exactly as in a networked session.
    """
    x_train, y_train = train
    client_part, server_part = M.build_parts(config, sync.seed)
    client = ClientTrainer(client_part, sync.learning_rate, noise)
    server = ServerTrainer(server_part, sync.learning_rate)

    def predict(xb):
        return server.predict(from_wire(to_wire(client.infer(xb), sync.exact)))

    result = TrainResult(M.merge(client_part, server_part))
    for epoch in range(sync.epochs):
        losses, hits = [], 0
        for idx in batch_indices(len(x_train), sync.batch_size, sync.seed, epoch):
            sent = from_wire(to_wire(client.forward(x_train[idx]), sync.exact))
            loss, probs, grad = server.step(sent, y_train[idx])
            client.backward(from_wire(to_wire(grad, sync.exact)))
            losses.append(loss * len(idx))
            hits += int(np.sum(np.argmax(probs, axis=-1) == y_train[idx]))
        acc = _evaluate(predict, *test)
        entry = EpochLog(epoch, float(np.sum(losses) / len(x_train)), hits / len(x_train), acc)
        result.history.append(entry)
        if on_epoch is not None:
            on_epoch(entry, result.params)
    return result
