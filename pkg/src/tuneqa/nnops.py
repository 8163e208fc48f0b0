"""Small numeric primitives shared by the adapter and the toy decoder.

Everything operates on float64 arrays over the last axis and comes in
forward/backward pairs so gradients can be assembled by hand.
"""

from __future__ import annotations

import numpy as np

LN_EPS = 1e-5


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def silu(x: np.ndarray) -> np.ndarray:
    return x * sigmoid(x)


def silu_grad(x: np.ndarray) -> np.ndarray:
    s = sigmoid(x)
    return s * (1.0 + x * (1.0 - s))


def layer_norm(x: np.ndarray, weight: np.ndarray, bias: np.ndarray,
               eps: float = LN_EPS):
    """Normalize the last axis to mean 0 / unit variance, then scale and shift.

    Returns (y, cache) where cache feeds layer_norm_backward.
    """
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    return weight * xhat + bias, (xhat, inv)


def layer_norm_backward(dy: np.ndarray, cache, weight: np.ndarray):
    """Gradients of layer_norm: returns (dx, dweight, dbias)."""
    xhat, inv = cache
    dxhat = dy * weight
    m = dxhat.mean(axis=-1, keepdims=True)
    mx = (dxhat * xhat).mean(axis=-1, keepdims=True)
    dx = inv * (dxhat - m - xhat * mx)
    lead = tuple(range(dy.ndim - 1))
    dweight = (dy * xhat).sum(axis=lead) if lead else dy * xhat
    dbias = dy.sum(axis=lead) if lead else dy.copy()
    return dx, dweight, dbias


def softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(y: np.ndarray, dy: np.ndarray) -> np.ndarray:
    inner = (dy * y).sum(axis=-1, keepdims=True)
    return y * (dy - inner)


def log_softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
