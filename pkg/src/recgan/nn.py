"""Dense-network building blocks with hand-written backward passes.

Tensors are plain numpy arrays.  Layers own ``Param`` blocks and never keep
activations: ``forward`` returns ``(output, cache)`` and ``backward`` takes the
cache back, so one layer instance can be applied to several inputs in the same
step (this is how the shared trunks of the coupled networks are used).
Parameter gradients are accumulated into ``Param.grad``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np


@dataclass(eq=False)
class Param:
    name: str
    shape: tuple
    trainable: bool = True
    value: np.ndarray | None = None
    grad: np.ndarray | None = None

    @property
    def size(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64))

    def zero_grad(self):
        if self.value is not None:
            self.grad = np.zeros_like(self.value)


def glorot_uniform(rng, shape, dtype=np.float32):
    fan_in, fan_out = shape[0], shape[-1]
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    # drawn in the target dtype and scaled in place: full-size heads are ~1e8 entries
    out = rng.random(shape, dtype=dtype)
    out *= 2 * limit
    out -= limit
    return out


class Dense:
    """y = x W + b."""

    def __init__(self, name, n_in, n_out):
        self.W = Param(f"{name}.W", (n_in, n_out))
        self.b = Param(f"{name}.b", (n_out,))

    def params(self):
        return [self.W, self.b]

    def init(self, rng, dtype):
        self.W.value = glorot_uniform(rng, self.W.shape, dtype)
        self.b.value = np.zeros(self.b.shape, dtype)

    def forward(self, x):
        if x.shape[-1] != self.W.shape[0]:
            raise ValueError(f"{self.W.name}: input width {x.shape[-1]} != {self.W.shape[0]}")
        return x @ self.W.value + self.b.value, x

    def backward(self, dy, x):
        self.W.grad += x.T @ dy
        self.b.grad += dy.sum(axis=0)
        return dy @ self.W.value.T


class BatchNorm:
    """Per-feature batch normalization with running statistics.

    Training mode normalizes with the batch mean and (biased) variance and, if
    ``update_stats``, moves the running statistics by ``1 - momentum``.
    Inference mode uses the running statistics.
    """

    def __init__(self, name, dim, momentum=0.99, eps=1e-3):
        self.gamma = Param(f"{name}.gamma", (dim,))
        self.beta = Param(f"{name}.beta", (dim,))
        self.moving_mean = Param(f"{name}.moving_mean", (dim,), trainable=False)
        self.moving_var = Param(f"{name}.moving_var", (dim,), trainable=False)
        self.momentum = momentum
        self.eps = eps

    def params(self):
        return [self.gamma, self.beta, self.moving_mean, self.moving_var]

    def init(self, rng, dtype):
        dim = self.gamma.shape
        self.gamma.value = np.ones(dim, dtype)
        self.beta.value = np.zeros(dim, dtype)
        self.moving_mean.value = np.zeros(dim, dtype)
        self.moving_var.value = np.ones(dim, dtype)

    def forward(self, x, training, update_stats=True):
        if not training:
            inv = 1.0 / np.sqrt(self.moving_var.value + self.eps)
            xhat = (x - self.moving_mean.value) * inv
            return self.gamma.value * xhat + self.beta.value, None
        mean = x.mean(axis=0)
        var = x.var(axis=0)
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean) * inv
        if update_stats:
            m = self.momentum
            self.moving_mean.value[...] = m * self.moving_mean.value + (1 - m) * mean
            self.moving_var.value[...] = m * self.moving_var.value + (1 - m) * var
        return self.gamma.value * xhat + self.beta.value, (xhat, inv)

    def backward(self, dy, cache):
        xhat, inv = cache
        n = dy.shape[0]
        self.gamma.grad += (dy * xhat).sum(axis=0)
        self.beta.grad += dy.sum(axis=0)
        dxhat = dy * self.gamma.value
        return inv / n * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))


class Embedding:
    def __init__(self, name, n_rows, dim):
        self.table = Param(f"{name}.table", (n_rows, dim))

    def params(self):
        return [self.table]

    def init(self, rng, dtype):
        self.table.value = glorot_uniform(rng, self.table.shape, dtype)

    def forward(self, idx):
        idx = np.asarray(idx)
        if idx.size and (idx.min() < 0 or idx.max() >= self.table.shape[0]):
            raise ValueError(f"{self.table.name}: index out of range")
        return self.table.value[idx], idx

    def backward(self, dy, idx):
        np.add.at(self.table.grad, idx, dy)


def relu(x):
    return np.maximum(x, 0), x > 0


def relu_backward(dy, mask):
    return dy * mask


def tanh(x):
    y = np.tanh(x)
    return y, y


def tanh_backward(dy, y):
    return dy * (1 - y * y)


def multiply(a, b):
    return a * b, (a, b)


def multiply_backward(dy, cache):
    a, b = cache
    return dy * b, dy * a


def dropout(x, rate, rng, training):
    """Inverted dropout: kept units are scaled by 1/(1-rate) in training mode."""
    if not training or rate == 0:
        return x, None
    keep = 1.0 - rate
    mask = (rng.random(x.shape) < keep).astype(x.dtype) / keep
    return x * mask, mask


def dropout_backward(dy, mask):
    return dy if mask is None else dy * mask


def pool_output_shape(shape, window, stride):
    (h, w), (wh, ww), (sh, sw) = shape, window, stride
    if wh > h or ww > w:
        raise ValueError(f"pool window {window} larger than input {shape}")
    return (h - wh) // sh + 1, (w - ww) // sw + 1


def avgpool2d(x, window, stride):
    """Average pooling over the last two axes, no padding, floor output size."""
    (wh, ww), (sh, sw) = window, stride
    oh, ow = pool_output_shape(x.shape[-2:], window, stride)
    out = np.zeros(x.shape[:-2] + (oh, ow), dtype=x.dtype)
    for i in range(wh):
        for j in range(ww):
            out += x[..., i:i + sh * (oh - 1) + 1:sh, j:j + sw * (ow - 1) + 1:sw]
    out /= wh * ww
    return out, x.shape


def avgpool2d_backward(dy, in_shape, window, stride):
    (wh, ww), (sh, sw) = window, stride
    oh, ow = dy.shape[-2:]
    dx = np.zeros(in_shape, dtype=dy.dtype)
    share = dy / (wh * ww)
    for i in range(wh):
        for j in range(ww):
            dx[..., i:i + sh * (oh - 1) + 1:sh, j:j + sw * (ow - 1) + 1:sw] += share
    return dx


def sigmoid_xent(logit, label):
    """Mean sigmoid cross-entropy and its gradient w.r.t. the logits.

    ``label`` may be a scalar or an array in [0, 1]; label 1 gives -log D,
    label 0 gives -log(1 - D).
    """
    logit = np.asarray(logit, dtype=np.float64)
    label = np.broadcast_to(np.asarray(label, dtype=np.float64), logit.shape)
    loss = np.maximum(logit, 0) - logit * label + np.log1p(np.exp(-np.abs(logit)))
    prob = 0.5 * (1.0 + np.tanh(0.5 * logit))
    n = max(logit.size, 1)
    return float(loss.mean()) if logit.size else 0.0, (prob - label) / n


@dataclass
class Adam:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-7
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def step(self, params):
        """Bias-corrected update of every trainable param from its ``grad``."""
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p in params:
            if not p.trainable:
                continue
            g = p.grad
            m = self.m.get(p.name)
            if m is None:
                m = self.m[p.name] = np.zeros_like(p.value)
                self.v[p.name] = np.zeros_like(p.value)
            v = self.v[p.name]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            p.value -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.value.dtype)


def relative_error(analytic, numeric, floor=1e-6):
    """Elementwise |a - n| / max(|a|, |n|, floor), maximized.

    Entries whose gradient is below ``floor`` in magnitude (e.g. a bias that a
    following batch norm cancels exactly) are compared absolutely, so
    finite-difference round-off on a true zero does not count as an error.
    """
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float((np.abs(analytic - numeric) / scale).max()) if analytic.size else 0.0


def grad_check(loss_and_grads: Callable[[], tuple], params, h=1e-5, tolerance=1e-4,
               max_entries=None, rng=None):
    """Compare analytic gradients with central differences for every trainable block.

    ``loss_and_grads`` must zero the grads, run forward and backward, and return
    ``(loss, {param_name: grad})``.  It is called once for the analytic pass and
    twice per perturbed entry, so it must be deterministic.  With
    ``max_entries`` only that many randomly chosen entries of each block are
    checked.  Returns ``{"max_error": float, "blocks": {name: error}, "passed": bool}``.
    """
    _, analytic = loss_and_grads()
    analytic = {k: np.array(v, dtype=np.float64) for k, v in analytic.items()}
    rng = rng or np.random.default_rng(0)
    report = {}
    for p in params:
        if not p.trainable:
            continue
        flat = p.value.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        numeric = np.empty(idx.size)
        for j, i in enumerate(idx):
            old = flat[i]
            flat[i] = old + h
            fp = loss_and_grads()[0]
            flat[i] = old - h
            fm = loss_and_grads()[0]
            flat[i] = old
            numeric[j] = (fp - fm) / (2 * h)
        report[p.name] = relative_error(analytic[p.name].reshape(-1)[idx], numeric)
    worst = max(report.values(), default=0.0)
    return {"max_error": worst, "blocks": report, "passed": worst < tolerance}
