"""Reverse-mode operators for training a small convolutional denoiser.

Arrays are plain ``numpy.ndarray`` in (batch, channel, row, col) layout.
Every operator takes an optional :class:`Tape`; when one is given, the
operator records a closure that maps the gradient of its output to the
gradient of its input and accumulates parameter gradients in place.

>>> tape = Tape()
>>> y = relu(x, tape=tape)
>>> loss = l2_loss(y, target, mask, tape=tape)
>>> dx = tape.backward()
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional

import numpy as np

from .errors import NumericalError

logger = logging.getLogger(__name__)


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class NonFiniteGradientError(NumericalError):
    """An optimizer step was asked to apply a NaN or Inf gradient."""


@dataclass(eq=False)
class Parameter:
    value: np.ndarray
    grad: np.ndarray = None
    trainable: bool = True

    def __post_init__(self):
        self.value = np.asarray(self.value)
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        if self.grad.shape != self.value.shape:
            raise ShapeError(f"grad shape {self.grad.shape} != value shape {self.value.shape}")

    @property
    def shape(self):
        return self.value.shape


class Tape:
    """Records backward closures in execution order."""

    def __init__(self):
        self._ops: list[Callable[[np.ndarray], np.ndarray]] = []

    def record(self, backward: Callable[[np.ndarray], np.ndarray]) -> None:
        self._ops.append(backward)

    def __len__(self):
        return len(self._ops)

    def backward(self, grad=1.0):
        """Run recorded closures in reverse; return the gradient w.r.t. the first input."""
        g = grad
        for op in reversed(self._ops):
            g = op(g)
        self._ops.clear()
        return g


def _check4(x, name):
    if x.ndim != 4:
        raise ShapeError(f"{name} must be 4-D (batch, channel, row, col), got shape {x.shape}")


def _padded_flat(x: np.ndarray, pad: int) -> np.ndarray:
    """Zero-padded copy in channel-major memory, flattened to (C, B*Hp*Wp)."""
    b, c, h, w = x.shape
    xp = np.zeros((c, b, h + 2 * pad, w + 2 * pad), dtype=x.dtype)
    xp[:, :, pad:pad + h, pad:pad + w] = x.transpose(1, 0, 2, 3)
    return xp.reshape(c, -1)


def _shift_conv(xf: np.ndarray, taps: np.ndarray, shape, pad: int, sign: int = 1) -> np.ndarray:
    """Correlate a padded flat buffer with per-offset matrices ``taps[i, j]`` (O, C).

    Every kernel offset is one matmul on a contiguous shifted slice of the
    flattened buffer, so no im2col matrix is materialized. Returns the
    interior as a (B, O, H, W) view of channel-major memory.
    """
    b, _, h, w = shape
    k = taps.shape[0]
    hp, wp = h + 2 * pad, w + 2 * pad
    n = xf.shape[1]
    lo, hi = pad * wp + pad, n - (pad * wp + pad)
    out = np.zeros((taps.shape[2], n), dtype=np.result_type(xf, taps))
    tmp = np.empty((taps.shape[2], hi - lo), dtype=out.dtype)
    for i in range(k):
        for j in range(k):
            off = sign * ((i - pad) * wp + (j - pad))
            np.matmul(taps[i, j], xf[:, lo + off:hi + off], out=tmp)
            out[:, lo:hi] += tmp
    out = out.reshape(-1, b, hp, wp)[:, :, pad:pad + h, pad:pad + w]
    return out.transpose(1, 0, 2, 3)


def conv2d(x: np.ndarray, weight: Parameter, bias: Parameter, padding: Optional[int] = None,
           tape: Optional[Tape] = None) -> np.ndarray:
    """2-D convolution with zero padding that preserves spatial size.

    ``weight`` has shape (out_channels, in_channels, k, k) with odd ``k``;
    ``bias`` has shape (out_channels,). Like most deep learning frameworks
    this is a cross-correlation.
    """
    _check4(x, "input")
    w = weight.value
    if w.ndim != 4 or w.shape[2] != w.shape[3]:
        raise ShapeError(f"weight must be (out, in, k, k), got {w.shape}")
    k = w.shape[-1]
    if k % 2 == 0:
        raise ShapeError(f"kernel size must be odd, got {k}")
    if padding is None:
        padding = (k - 1) // 2
    if padding != (k - 1) // 2:
        raise ShapeError(f"padding {padding} does not preserve size for kernel {k}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(
            f"input has {x.shape[1]} channels but weight expects {w.shape[1]} "
            f"(input {x.shape}, weight {w.shape})")
    if bias.value.shape != (w.shape[0],):
        raise ShapeError(f"bias shape {bias.value.shape} != ({w.shape[0]},)")

    xf = _padded_flat(x, padding)
    taps = np.ascontiguousarray(w.transpose(2, 3, 0, 1))  # k, k, O, C
    y = _shift_conv(xf, taps, x.shape, padding)
    y += bias.value.reshape(1, -1, 1, 1)

    if tape is not None:
        def backward(dy):
            dyf = _padded_flat(dy, padding)
            if weight.trainable:
                b, _, h, ww = x.shape
                wp = ww + 2 * padding
                n = xf.shape[1]
                lo, hi = padding * wp + padding, n - (padding * wp + padding)
                dw = np.empty_like(taps.transpose(0, 1, 3, 2))  # k, k, C, O
                for i in range(k):
                    for j in range(k):
                        off = (i - padding) * wp + (j - padding)
                        dw[i, j] = xf[:, lo + off:hi + off] @ dyf[:, lo:hi].T
                weight.grad += dw.transpose(3, 2, 0, 1).astype(weight.grad.dtype, copy=False)
            if bias.trainable:
                bias.grad += dy.sum(axis=(0, 2, 3)).astype(bias.grad.dtype, copy=False)
            # adjoint: transposed taps applied at negated offsets
            taps_t = np.ascontiguousarray(taps.transpose(0, 1, 3, 2))
            return _shift_conv(dyf, taps_t, (x.shape[0], w.shape[0]) + x.shape[2:], padding, sign=-1)

        tape.record(backward)
    return y


def relu(x: np.ndarray, tape: Optional[Tape] = None) -> np.ndarray:
    y = np.maximum(x, 0)
    if tape is not None:
        tape.record(lambda dy: dy * (x > 0))
    return y


@dataclass
class RunningStats:
    mean: np.ndarray
    var: np.ndarray
    momentum: float = 0.1

    @classmethod
    def create(cls, channels: int, dtype=np.float32, momentum: float = 0.1) -> "RunningStats":
        return cls(np.zeros(channels, dtype), np.ones(channels, dtype), momentum)


BN_EPS = 1e-5


def batch_norm(x: np.ndarray, gamma: Parameter, beta: Parameter, running: RunningStats,
               mode: str = "train", update_running: bool = True, eps: float = BN_EPS,
               tape: Optional[Tape] = None) -> np.ndarray:
    """Per-channel normalization over (batch, row, col).

    In ``train`` mode batch statistics are used and, unless
    ``update_running`` is false, folded into ``running`` with its momentum.
    ``eval`` mode normalizes with the running statistics.
    """
    _check4(x, "input")
    c = x.shape[1]
    if gamma.value.shape != (c,) or beta.value.shape != (c,):
        raise ShapeError(f"gamma/beta must have shape ({c},)")
    shape = (1, c, 1, 1)
    if mode == "train":
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        if update_running:
            n = x.size // c
            unbiased = var * n / max(n - 1, 1)
            m = running.momentum
            running.mean[...] = (1 - m) * running.mean + m * mean
            running.var[...] = (1 - m) * running.var + m * unbiased
    elif mode == "eval":
        mean, var = running.mean, running.var
    else:
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")

    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean.reshape(shape)) * inv_std.reshape(shape)
    y = gamma.value.reshape(shape) * xhat + beta.value.reshape(shape)

    if tape is not None:
        def backward(dy):
            if gamma.trainable:
                gamma.grad += (dy * xhat).sum(axis=(0, 2, 3)).astype(gamma.grad.dtype, copy=False)
            if beta.trainable:
                beta.grad += dy.sum(axis=(0, 2, 3)).astype(beta.grad.dtype, copy=False)
            dxhat = dy * gamma.value.reshape(shape)
            if mode == "eval":
                return dxhat * inv_std.reshape(shape)
            mean_d = dxhat.mean(axis=(0, 2, 3), keepdims=True)
            mean_dx = (dxhat * xhat).mean(axis=(0, 2, 3), keepdims=True)
            return (dxhat - mean_d - xhat * mean_dx) * inv_std.reshape(shape)

        tape.record(backward)
    return y


def _masked_loss(pred, target, mask, elementwise, derivative, tape):
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {pred.shape} and target {target.shape} differ")
    if mask is None:
        mask = np.ones(pred.shape, dtype=pred.dtype)
    else:
        mask = np.broadcast_to(np.asarray(mask, dtype=pred.dtype), pred.shape)
    count = float(mask.sum())
    diff = pred - target
    total = float((mask * elementwise(diff)).sum(dtype=np.float64))
    if count == 0:
        logger.info("all-zero mask, pair skipped")
    denom = max(1.0, count)
    if tape is not None:
        def backward(dl):
            return (dl / denom) * mask * derivative(diff)

        tape.record(backward)
    return total / denom


def masked_l1_loss(pred: np.ndarray, target: np.ndarray, mask=None,
                   tape: Optional[Tape] = None) -> float:
    """Mean absolute error over pixels with nonzero ``mask``.

    The sum is divided by ``max(1, mask.sum())``; sign(0) is taken as 0.
    ``target`` and ``mask`` are treated as constants.
    """
    return _masked_loss(pred, target, mask, np.abs, np.sign, tape)


def l2_loss(pred: np.ndarray, target: np.ndarray, mask=None, tape: Optional[Tape] = None) -> float:
    """Masked mean squared error, normalized like :func:`masked_l1_loss`."""
    return _masked_loss(pred, target, mask, np.square, lambda d: 2 * d, tape)


LOSSES = {"l1": masked_l1_loss, "l2": l2_loss}


def zero_grads(params: Iterable[Parameter]) -> None:
    for p in params:
        p.grad[...] = 0


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0 < self.beta1 < 1 or not 0 < self.beta2 < 1:
            raise ValueError("beta1 and beta2 must lie in (0, 1)")
        if self.lr < 0 or self.eps <= 0:
            raise ValueError("lr must be non-negative and eps positive")


def adam_step(params: list[Parameter], state: AdamState) -> None:
    """One bias-corrected Adam update of the trainable ``params``.

    Moments are keyed by position in ``params``, so the list order must be
    stable across calls. Gradients are left untouched.
    """
    trainable = [(i, p) for i, p in enumerate(params) if p.trainable]
    for i, p in trainable:
        if not np.all(np.isfinite(p.grad)):
            raise NonFiniteGradientError(f"non-finite gradient in parameter {i} {p.shape}")
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for i, p in trainable:
        if i not in state.m:
            state.m[i] = np.zeros_like(p.value)
            state.v[i] = np.zeros_like(p.value)
        m, v, g = state.m[i], state.v[i], p.grad
        if m.shape != p.shape:
            raise ShapeError(f"optimizer state for parameter {i} has shape {m.shape}, expected {p.shape}")
        m *= state.beta1
        m += (1 - state.beta1) * g
        v *= state.beta2
        v += (1 - state.beta2) * (g * g)
        p.value -= (state.lr / bc1) * m / (np.sqrt(v / bc2) + state.eps)
