"""Dense array ops with hand-written backward passes, plus Adam.

Every op works on numpy arrays whose last two axes are (rows, cols); leading
axes are treated as a batch. Forward functions return ``(out, cache)`` and the
matching ``*_backward`` takes the upstream gradient and that cache.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DEBUG_FINITE = False


class ShapeError(ValueError):
    pass


def check_finite(x: np.ndarray, what: str = "tensor") -> None:
    if not np.all(np.isfinite(x)):
        raise FloatingPointError(f"non-finite values in {what}")


@dataclass
class Parameter:
    """A trainable array together with its gradient and Adam moments."""

    value: np.ndarray
    grad: np.ndarray = field(default=None)
    adam_m: np.ndarray = field(default=None)
    adam_v: np.ndarray = field(default=None)
    step_count: int = 0

    def __post_init__(self):
        self.value = np.asarray(self.value)
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        if self.adam_m is None:
            self.adam_m = np.zeros_like(self.value)
        if self.adam_v is None:
            self.adam_v = np.zeros_like(self.value)
        shapes = {a.shape for a in (self.value, self.grad, self.adam_m, self.adam_v)}
        if len(shapes) != 1:
            raise ShapeError(f"parameter tensors disagree in shape: {shapes}")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def size(self) -> int:
        return self.value.size

    def zero_grad(self) -> None:
        self.grad[...] = 0.0


# ---------------------------------------------------------------- matmul


def matmul(a: np.ndarray, b: np.ndarray):
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    return a @ b, (a, b)


def _sum_to_shape(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    return g


def matmul_backward(dout: np.ndarray, cache):
    a, b = cache
    da = dout @ np.swapaxes(b, -1, -2)
    db = np.swapaxes(a, -1, -2) @ dout
    return _sum_to_shape(da, a.shape), _sum_to_shape(db, b.shape)


def linear(x: np.ndarray, w: np.ndarray, bias: np.ndarray | None = None):
    """x @ w + bias, with bias broadcast over rows."""
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: {x.shape} @ {w.shape}")
    # one 2-D GEMM over all leading axes; numpy's stacked matmul is far slower
    out = (x.reshape(-1, x.shape[-1]) @ w).reshape(*x.shape[:-1], w.shape[1])
    if bias is not None:
        out += bias
    return out, (x, w, bias is not None)


def linear_backward(dout: np.ndarray, cache):
    x, w, has_bias = cache
    x2 = x.reshape(-1, x.shape[-1])
    d2 = dout.reshape(-1, dout.shape[-1])
    dx = (d2 @ w.T).reshape(x.shape)
    dw = x2.T @ d2
    db = d2.sum(axis=0) if has_bias else None
    return dx, dw, db


# ---------------------------------------------------------------- softmax


def softmax_rows(x: np.ndarray):
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)
    if DEBUG_FINITE:
        check_finite(y, "softmax output")
    return y, y


def softmax_rows_backward(dy: np.ndarray, y: np.ndarray) -> np.ndarray:
    return y * (dy - (dy * y).sum(axis=-1, keepdims=True))


def log_softmax_rows(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


# ---------------------------------------------------------------- layernorm


def layernorm_rows(x: np.ndarray, gain: np.ndarray, bias: np.ndarray, eps: float = 1e-5):
    """Row-wise layer normalisation using the biased (1/d) variance."""
    if x.shape[-1] < 2:
        raise ShapeError("layernorm needs at least two columns")
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    return xhat * gain + bias, (xhat, inv, gain)


def layernorm_rows_backward(dout: np.ndarray, cache):
    xhat, inv, gain = cache
    d = xhat.shape[-1]
    flat_out = dout.reshape(-1, d)
    dgain = (flat_out * xhat.reshape(-1, d)).sum(axis=0)
    dbias = flat_out.sum(axis=0)
    dxhat = dout * gain
    dx = inv * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    return dx, dgain, dbias


# ---------------------------------------------------------------- relu / dropout


def relu(x: np.ndarray):
    mask = x > 0
    return x * mask, mask


def relu_backward(dout: np.ndarray, mask: np.ndarray) -> np.ndarray:
    # subgradient at exactly 0 is 0
    return dout * mask


def dropout(x: np.ndarray, p: float, training: bool, rng: np.random.Generator | None):
    """Inverted dropout. Identity (and a ``None`` cache) outside training."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x, None
    if rng is None:
        raise ValueError("training-mode dropout needs an rng")
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return x * keep, keep


def dropout_backward(dout: np.ndarray, keep: np.ndarray | None) -> np.ndarray:
    return dout if keep is None else dout * keep


# ---------------------------------------------------------------- loss


def cross_entropy_from_logits(logits: np.ndarray, targets: np.ndarray):
    """Mean negative log-likelihood over rows of an (R, C) logit matrix.

    Returns ``(loss, dlogits)``; the gradient already carries the 1/R factor.
    """
    logits = np.asarray(logits)
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2:
        raise ShapeError("cross entropy expects an (R, C) logit matrix")
    r, c = logits.shape
    if r < 1 or targets.shape != (r,):
        raise ShapeError(f"need one target per row: logits {logits.shape}, targets {targets.shape}")
    if targets.min() < 0 or targets.max() >= c:
        raise IndexError(f"target out of range [0, {c})")
    logp = log_softmax_rows(logits)
    rows = np.arange(r)
    loss = -logp[rows, targets].mean()
    grad = np.exp(logp)
    grad[rows, targets] -= 1.0
    grad /= r
    return float(loss), grad


# ---------------------------------------------------------------- adam


def adam_step(params, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> None:
    """Bias-corrected Adam update, in place; zeroes gradients afterwards."""
    for p in params:
        p.step_count += 1
        t = p.step_count
        g = p.grad
        p.adam_m *= beta1
        p.adam_m += (1.0 - beta1) * g
        p.adam_v *= beta2
        p.adam_v += (1.0 - beta2) * (g * g)
        m_hat = p.adam_m / (1.0 - beta1**t)
        v_hat = p.adam_v / (1.0 - beta2**t)
        p.value -= lr * m_hat / (np.sqrt(v_hat) + eps)
        p.zero_grad()
