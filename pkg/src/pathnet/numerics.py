"""Dense float64 primitives: linear layers, ReLU, softmax cross-entropy, SGD, seeded RNG.

Arrays follow the row-major convention ``x @ W.T + b`` with ``W`` of shape
``(out, in)`` and batches stacked along the first axis. Backward passes are
written by hand; there is no autodiff graph.
"""

from __future__ import annotations

import numpy as np

DTYPE = np.float64


class DimensionError(ValueError):
    """Raised when array shapes do not agree."""


def rng_stream(seed: int, stream_id: int = 0) -> np.random.Generator:
    """Counter-based generator keyed by ``(seed, stream_id)``.

    Philox is used so that disjoint streams (one per worker, per task, ...)
    can be derived without coordination and replay identically anywhere.
    """
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, int(stream_id) & 0xFFFFFFFFFFFFFFFF])
    return np.random.Generator(np.random.Philox(ss))


def glorot_uniform(fan_out: int, fan_in: int, rng: np.random.Generator) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_out, fan_in)).astype(DTYPE, copy=False)


def linear_forward(W: np.ndarray, b: np.ndarray, x: np.ndarray) -> np.ndarray:
    if x.ndim != 2 or W.ndim != 2 or x.shape[1] != W.shape[1] or b.shape != (W.shape[0],):
        raise DimensionError(
            f"linear_forward: x{tuple(x.shape)} W{tuple(W.shape)} b{tuple(b.shape)}"
        )
    return x @ W.T + b


def linear_backward(W: np.ndarray, x: np.ndarray, dout: np.ndarray):
    """Return ``(dW, db, dx)`` for ``out = x @ W.T + b``."""
    if dout.shape != (x.shape[0], W.shape[0]):
        raise DimensionError(f"linear_backward: dout{tuple(dout.shape)} for W{tuple(W.shape)}")
    return dout.T @ x, dout.sum(axis=0), dout @ W


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(pre: np.ndarray, dout: np.ndarray) -> np.ndarray:
    return dout * (pre > 0)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_xent(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy over the batch and its gradient w.r.t. the logits.

    The gradient is ``(softmax - onehot) / batch``.
    """
    labels = np.asarray(labels)
    n, k = logits.shape
    if labels.shape != (n,):
        raise DimensionError(f"softmax_xent: {labels.shape[0] if labels.ndim else 0} labels for batch {n}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"softmax_xent: label out of range [0, {k})")
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = float(np.mean(logsum - z[rows, labels]))
    d = softmax(logits)
    d[rows, labels] -= 1.0
    return loss, d / n


def sgd_step(param: np.ndarray, grad: np.ndarray, lr: float) -> np.ndarray:
    """In-place ``param -= lr * grad``; returns ``param``."""
    if param.shape != grad.shape:
        raise DimensionError(f"sgd_step: param{tuple(param.shape)} grad{tuple(grad.shape)}")
    if lr != 0.0:
        param -= lr * grad
    return param
