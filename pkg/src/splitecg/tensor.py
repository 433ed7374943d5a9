"""Numeric kernels for the 1D CNN: convolution, dense layers, activations,
pooling, softmax cross-entropy and Adam.

Every kernel works on float64 numpy arrays.  Convolution kernels accept a
single sample shaped ``(channels, length)`` or a batch shaped
``(batch, channels, length)``.  Outputs are checked for NaN/Inf.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

LEAKY_SLOPE = 0.01
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


def _finite(arr: np.ndarray, where: str) -> np.ndarray:
    if not np.isfinite(arr).all():
        raise FloatingPointError(f"non-finite values produced by {where}")
    return arr


def _as_f64(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


# ---------------------------------------------------------------------------
# Deterministic initialisation
# ---------------------------------------------------------------------------

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


def _mix64(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


class SplitMix64:
    """splitmix64 stream.  Bit-compatible with the reference C version."""

    def __init__(self, seed: int):
        self.state = np.uint64(seed & 0xFFFFFFFFFFFFFFFF)

    def next_u64(self, n: int) -> np.ndarray:
        with np.errstate(over="ignore"):
            steps = np.arange(1, n + 1, dtype=np.uint64)
            states = self.state + steps * _GOLDEN
            out = _mix64(states)
            self.state = states[-1] if n else self.state
        return out

    def uniform(self, n: int) -> np.ndarray:
        """``n`` doubles in [0, 1) from the top 53 bits of each draw."""
        return (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53


def derive_seed(seed: int, *keys: int) -> int:
    """Mix ``keys`` into ``seed`` so that independent streams never overlap."""
    z = np.uint64(seed & 0xFFFFFFFFFFFFFFFF)
    with np.errstate(over="ignore"):
        for key in keys:
            z = _mix64(np.asarray(z + np.uint64(key + 1) * _GOLDEN, dtype=np.uint64))
    return int(z)


def glorot_uniform(shape: tuple[int, ...], fan_in: int, fan_out: int, rng: SplitMix64) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    n = int(np.prod(shape))
    return ((2.0 * rng.uniform(n) - 1.0) * limit).reshape(shape)


# ---------------------------------------------------------------------------
# 1D convolution ("same" zero padding, cross-correlation orientation)
# ---------------------------------------------------------------------------

def _windows(x: np.ndarray, k: int, length: int) -> np.ndarray:
    """Stack the ``k`` shifted views of padded ``x``: (..., C*k, length)."""
    cols = np.stack([x[..., t:t + length] for t in range(k)], axis=-2)
    return cols.reshape(*x.shape[:-2], x.shape[-2] * k, length)


def _check_conv(x: np.ndarray, weight: np.ndarray, channel_axis_size: int, name: str):
    if weight.ndim != 3:
        raise ShapeError(f"{name}: weight must be (out, in, k), got {weight.shape}")
    k = weight.shape[2]
    if k % 2 == 0:
        raise ShapeError(f"{name}: filter size must be odd, got {k}")
    if x.ndim not in (2, 3):
        raise ShapeError(f"{name}: expected (C, L) or (B, C, L), got {x.shape}")
    if x.shape[-2] != channel_axis_size:
        raise ShapeError(f"{name}: {x.shape[-2]} channels but kernel expects {channel_axis_size}")
    if x.shape[-1] < k:
        raise ShapeError(f"{name}: length {x.shape[-1]} shorter than filter {k}")


def conv1d_forward(x, weight, bias) -> np.ndarray:
    """z_k = b_k + sum_j corr(a_j, w_kj) with symmetric zero padding."""
    x, weight, bias = _as_f64(x), _as_f64(weight), _as_f64(bias)
    _check_conv(x, weight, weight.shape[1], "conv1d_forward")
    c_out, _, k = weight.shape
    if bias.shape != (c_out,):
        raise ShapeError(f"conv1d_forward: bias shape {bias.shape} != ({c_out},)")
    pad = (k - 1) // 2
    length = x.shape[-1]
    xp = np.pad(x, [(0, 0)] * (x.ndim - 1) + [(pad, pad)])
    z = weight.reshape(c_out, -1) @ _windows(xp, k, length) + bias[:, None]
    return _finite(np.ascontiguousarray(z), "conv1d_forward")


def conv1d_backward_input(grad_out, weight) -> np.ndarray:
    """Full convolution of the output gradient with the reversed filters,
    cropped back to the forward geometry."""
    grad_out, weight = _as_f64(grad_out), _as_f64(weight)
    _check_conv(grad_out, weight, weight.shape[0], "conv1d_backward_input")
    c_out, c_in, k = weight.shape
    pad = (k - 1) // 2
    length = grad_out.shape[-1]
    gp = np.pad(grad_out, [(0, 0)] * (grad_out.ndim - 1) + [(pad, pad)])
    w_rev = weight[:, :, ::-1].transpose(1, 0, 2).reshape(c_in, c_out * k)
    g = w_rev @ _windows(gp, k, length)
    return _finite(np.ascontiguousarray(g), "conv1d_backward_input")


def conv1d_backward_weights(grad_out, x, filter_size: int) -> tuple[np.ndarray, np.ndarray]:
    """Weight gradient corr(a_k, dE/dz_j) and per-channel bias sums.

    Batched inputs are summed over the batch axis.
    """
    grad_out, x = _as_f64(grad_out), _as_f64(x)
    if grad_out.shape[:-2] != x.shape[:-2] or grad_out.shape[-1] != x.shape[-1]:
        raise ShapeError(f"conv1d_backward_weights: grad {grad_out.shape} vs input {x.shape}")
    if filter_size % 2 == 0 or filter_size > x.shape[-1]:
        raise ShapeError(f"conv1d_backward_weights: bad filter size {filter_size}")
    pad = (filter_size - 1) // 2
    length = x.shape[-1]
    c_out, c_in = grad_out.shape[-2], x.shape[-2]
    xp = np.pad(x, [(0, 0)] * (x.ndim - 1) + [(pad, pad)])
    cols = _windows(xp, filter_size, length)
    if x.ndim == 2:
        dw = grad_out @ cols.T
        db = grad_out.sum(axis=-1)
    else:
        dw = np.einsum("bol,bml->om", grad_out, cols)
        db = grad_out.sum(axis=(0, 2))
    dw = dw.reshape(c_out, c_in, filter_size)
    return _finite(dw, "conv1d_backward_weights"), _finite(db, "conv1d_backward_weights")


# ---------------------------------------------------------------------------
# Activations, pooling, dense
# ---------------------------------------------------------------------------

def leaky_relu(z, alpha: float = LEAKY_SLOPE) -> np.ndarray:
    z = _as_f64(z)
    return _finite(np.where(z > 0, z, alpha * z), "leaky_relu")


def leaky_relu_grad(z, grad_out, alpha: float = LEAKY_SLOPE) -> np.ndarray:
    z, grad_out = _as_f64(z), _as_f64(grad_out)
    return _finite(np.where(z > 0, grad_out, alpha * grad_out), "leaky_relu_grad")


def maxpool2(x) -> tuple[np.ndarray, np.ndarray]:
    """Non-overlapping window-2 max pool along the last axis.

    Returns the pooled values and the absolute index of each winner; ties
    go to the left element.
    """
    x = _as_f64(x)
    length = x.shape[-1]
    if length % 2:
        raise ShapeError(f"maxpool2: length {length} is odd")
    pairs = x.reshape(*x.shape[:-1], length // 2, 2)
    pick = (pairs[..., 1] > pairs[..., 0]).astype(np.intp)
    indices = 2 * np.arange(length // 2) + pick
    out = np.where(pick == 1, pairs[..., 1], pairs[..., 0])
    return _finite(out, "maxpool2"), indices


def maxpool2_grad(grad_out, indices, length: int) -> np.ndarray:
    grad_out = _as_f64(grad_out)
    if grad_out.shape != indices.shape or length != 2 * grad_out.shape[-1]:
        raise ShapeError(f"maxpool2_grad: grad {grad_out.shape}, indices {indices.shape}, length {length}")
    grad_in = np.zeros(grad_out.shape[:-1] + (length,))
    np.put_along_axis(grad_in, indices, grad_out, axis=-1)
    return grad_in


def dense_forward(a, weight, bias) -> np.ndarray:
    """Affine map ``w a + b`` applied to a vector or to each row of a batch."""
    a, weight, bias = _as_f64(a), _as_f64(weight), _as_f64(bias)
    if a.shape[-1] != weight.shape[1] or bias.shape != (weight.shape[0],):
        raise ShapeError(f"dense_forward: input {a.shape}, weight {weight.shape}, bias {bias.shape}")
    return _finite(a @ weight.T + bias, "dense_forward")


def dense_backward(grad_out, a, weight) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Returns (input gradient, weight gradient, bias gradient)."""
    grad_out, a, weight = _as_f64(grad_out), _as_f64(a), _as_f64(weight)
    if grad_out.shape[-1] != weight.shape[0] or a.shape[-1] != weight.shape[1]:
        raise ShapeError(f"dense_backward: grad {grad_out.shape}, input {a.shape}, weight {weight.shape}")
    grad_in = grad_out @ weight
    if a.ndim == 1:
        grad_w = np.outer(grad_out, a)
        grad_b = grad_out.copy()
    else:
        grad_w = grad_out.T @ a
        grad_b = grad_out.sum(axis=0)
    return (_finite(grad_in, "dense_backward"), _finite(grad_w, "dense_backward"),
            _finite(grad_b, "dense_backward"))


def softmax(logits) -> np.ndarray:
    logits = _as_f64(logits)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits, labels):
    """Cross-entropy of softmax(logits) against integer labels.

    For a single logit vector ``labels`` is an int and the loss is that
    sample's loss.  For a batch ``(B, m)`` the loss is the batch mean and the
    returned gradient is already divided by ``B``.

    Returns (loss, probs, grad_logits).
    """
    logits = _as_f64(logits)
    m = logits.shape[-1]
    if m < 2:
        raise ShapeError("softmax_cross_entropy needs at least two classes")
    labels = np.asarray(labels, dtype=np.intp)
    if labels.shape != logits.shape[:-1]:
        raise ShapeError(f"labels {labels.shape} do not match logits {logits.shape}")
    if (labels < 0).any() or (labels >= m).any():
        raise IndexError(f"label out of range for {m} classes")
    shifted = logits - logits.max(axis=-1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    log_probs = shifted - log_norm
    probs = np.exp(log_probs)
    onehot = np.zeros_like(probs)
    np.put_along_axis(onehot, labels[..., None], 1.0, axis=-1)
    picked = np.take_along_axis(log_probs, labels[..., None], axis=-1)[..., 0]
    if logits.ndim == 1:
        loss = float(-picked)
        grad = probs - onehot
    else:
        batch = logits.shape[0]
        loss = float(-picked.sum() / batch)
        grad = (probs - onehot) / batch
    return loss, _finite(probs, "softmax"), _finite(grad, "softmax_cross_entropy")


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps: float = ADAM_EPS

    @classmethod
    def zeros_like(cls, params) -> "AdamState":
        return cls(m=[np.zeros_like(p) for p in params], v=[np.zeros_like(p) for p in params])


def adam_step(params: list[np.ndarray], grads: list[np.ndarray], state: AdamState, lr: float) -> list[np.ndarray]:
    """One bias-corrected Adam update, applied to ``params`` in place."""
    if not (len(params) == len(grads) == len(state.m) == len(state.v)):
        raise ShapeError("adam_step: params, grads and moments differ in count")
    state.step += 1
    t = state.step
    corr1 = 1.0 - state.beta1**t
    corr2 = 1.0 - state.beta2**t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if not (p.shape == g.shape == m.shape == v.shape):
            raise ShapeError(f"adam_step: shape mismatch {p.shape} vs {g.shape}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= lr * (m / corr1) / (np.sqrt(v / corr2) + state.eps)
        _finite(p, "adam_step")
    return params
