"""Differentiable building blocks and loss primitives.

Fused operations (softmax, log-softmax, layer norm, GELU) carry hand-written
vector-Jacobian products; the rest are compositions of :class:`Tensor` ops.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from vismae.errors import ContractError, DegenerateMaskError, LabelError, NumericInputError
from vismae.numerics.tensor import Tensor, as_tensor, make_node


def _check_finite(x: np.ndarray, what: str) -> None:
    if not np.isfinite(x).all():
        raise NumericInputError(f"{what}: non-finite input")


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    _check_finite(x.data, "softmax")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return make_node(s, (x,), bw)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    _check_finite(x.data, "log_softmax")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return make_node(out, (x,), bw)


def relu(x) -> Tensor:
    return as_tensor(x).relu()


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x) -> Tensor:
    """GELU, tanh approximation."""
    x = as_tensor(x)
    a = x.data
    inner = _GELU_C * (a + 0.044715 * a**3)
    t = np.tanh(inner)
    out = 0.5 * a * (1.0 + t)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * a * a)
        return (g * (0.5 * (1.0 + t) + 0.5 * a * (1.0 - t * t) * dinner),)

    return make_node(out, (x,), bw)


ACTIVATIONS = {"relu": relu, "gelu": gelu}


def activation(name: str):
    try:
        return ACTIVATIONS[name]
    except KeyError:
        raise ContractError(f"unknown activation {name!r}; choose from {sorted(ACTIVATIONS)}") from None


def linear(x, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` with ``weight`` stored as (in, out)."""
    x = as_tensor(x)
    if x.shape[-1] != weight.shape[0]:
        raise ContractError(f"linear: input width {x.shape[-1]} != weight rows {weight.shape[0]}")
    out = x @ weight
    return out if bias is None else out + bias


def layer_norm(x, weight: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    x = as_tensor(x)
    a = x.data
    mu = a.mean(axis=-1, keepdims=True)
    xc = a - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * weight.data + bias.data
    lead = tuple(range(a.ndim - 1))

    def bw(g):
        gx = g * weight.data
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return make_node(out, (x, weight, bias), bw)


def dropout(x, p: float, train: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout; the identity (same object) in eval mode or when p == 0."""
    x = as_tensor(x)
    if not train or p == 0.0:
        return x
    if not 0.0 <= p < 1.0:
        raise ContractError(f"dropout probability must be in [0, 1), got {p}")
    if rng is None:
        raise ContractError("dropout in train mode needs a random generator")
    # float32 draws are about twice as fast and plenty for a Bernoulli mask
    keep = (rng.random(x.shape, dtype=np.float32) >= p) * (1.0 / (1.0 - p))
    return x * keep


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    bounds = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return make_node(np.concatenate([t.data for t in ts], axis=axis), ts, bw)


def embedding(table: Tensor, indices) -> Tensor:
    """Row lookup ``table[indices]``; repeated indices accumulate gradient."""
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ContractError(f"embedding index out of range for table with {table.shape[0]} rows")
    return table[idx]


# -- attention and feed-forward blocks ----------------------------------------


def multi_head_attention(
    x: Tensor,
    wq: Tensor, bq: Tensor,
    wk: Tensor, bk: Tensor,
    wv: Tensor, bv: Tensor,
    wo: Tensor, bo: Tensor,
    n_heads: int,
    dropout_p: float = 0.0,
    train: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Bidirectional scaled dot-product self-attention over axis 1 of (B, T, d)."""
    b, t, d = x.shape
    if d % n_heads:
        raise ContractError(f"d_model={d} not divisible by n_heads={n_heads}")
    hd = d // n_heads

    def heads(z: Tensor) -> Tensor:
        return z.reshape(b, t, n_heads, hd).transpose(0, 2, 1, 3)

    q = heads(linear(x, wq, bq))
    k = heads(linear(x, wk, bk))
    v = heads(linear(x, wv, bv))
    scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(hd))
    weights = dropout(softmax(scores, axis=-1), dropout_p, train, rng)
    ctx = (weights @ v).transpose(0, 2, 1, 3).reshape(b, t, d)
    return linear(ctx, wo, bo)


def feed_forward(
    x: Tensor,
    w1: Tensor, b1: Tensor,
    w2: Tensor, b2: Tensor,
    act: str = "relu",
    dropout_p: float = 0.0,
    train: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    h = activation(act)(linear(x, w1, b1))
    return linear(dropout(h, dropout_p, train, rng), w2, b2)


# -- losses --------------------------------------------------------------------


def weighted_cross_entropy(logits, labels, class_weights) -> Tensor:
    """Batch mean of ``w[y] * -log softmax(z)[y]`` (not normalized by the weights)."""
    logits = as_tensor(logits)
    y = np.asarray(labels)
    if logits.ndim != 2 or logits.shape[0] != y.shape[0]:
        raise ContractError(f"logits {logits.shape} do not match {y.shape[0]} labels")
    if not np.isin(y, (0, 1)).all():
        raise LabelError("labels must be 0 or 1")
    w = np.asarray(class_weights, dtype=np.float64)
    if w.shape != (logits.shape[1],) or (w <= 0).any():
        raise ContractError("class weights must be positive, one per class")
    y = y.astype(np.int64)
    picked = log_softmax(logits)[np.arange(y.shape[0]), y]
    return -(picked * w[y]).mean()


def mse(pred, target, mask=None) -> Tensor:
    """Mean squared error, optionally restricted to cells where ``mask`` is true.

    ``mask=None`` takes the same code path as an all-true mask, so the two
    agree bit for bit.
    """
    pred = as_tensor(pred)
    target = as_tensor(target)
    if pred.shape != target.shape:
        raise ContractError(f"mse shape mismatch: {pred.shape} vs {target.shape}")
    if mask is None:
        mask = np.ones(pred.shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != pred.shape:
        raise ContractError(f"mask shape {mask.shape} != {pred.shape}")
    if not mask.any():
        raise DegenerateMaskError("mask selects no cells")
    diff = pred[mask] - target[mask]
    return (diff * diff).mean()
