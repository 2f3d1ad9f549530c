"""Neural-network operations on the autodiff tape.

Attention masking uses an additive -inf before the softmax, so masked
positions carry exactly zero weight and the normalization runs over the
visible keys only; the hard-zero property is exact, not approximate.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
from scipy.special import erf

from .errors import DegenerateMaskError, ShapeError
from .tensor import Tensor, _result, as_tensor, matmul, transpose

LAYER_NORM_EPS = 1e-5
_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(a: Tensor) -> Tensor:
    x = a.array
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    values = x * cdf

    def backward(g):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
        return (g * (cdf + x * pdf),)

    return _result(values, (a,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize the last axis to mean 0 / variance 1, then apply the affine."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm affine shapes {gain.shape}/{bias.shape} do not match feature dim {d}")
    mu = x.array.mean(axis=-1, keepdims=True)
    centered = x.array - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    values = xhat * gain.array + bias.array

    def backward(g):
        dxhat = g * gain.array
        dx = inv_std * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        axes = tuple(range(g.ndim - 1))
        dgain = (g * xhat).sum(axis=axes)
        dbias = g.sum(axis=axes)
        return dx, dgain, dbias

    return _result(values, (x, gain, bias), backward)


def embed(indices: Sequence[int], table: Tensor) -> Tensor:
    """Rows of `table` selected by token index; gradients scatter-add back."""
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1:
        raise ShapeError("embed expects a flat index sequence")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError(f"embedding index out of range for table with {table.shape[0]} rows")
    values = table.array[idx].copy()

    def backward(g):
        full = np.zeros_like(table.array)
        np.add.at(full, idx, g)
        return (full,)

    return _result(values, (table,), backward)


def _as_mask(mask, rows: int, cols: int) -> np.ndarray:
    m = np.asarray(mask, dtype=bool)
    if m.ndim == 1:
        m = np.broadcast_to(m, (rows, cols))
    if m.shape != (rows, cols):
        raise ShapeError(f"mask shape {m.shape} does not match logits shape {(rows, cols)}")
    return m


def masked_softmax(logits: Tensor, mask=None) -> Tensor:
    """Row softmax restricted to visible positions (mask True = visible).

    Masked entries get weight exactly 0.0 and each row renormalizes over
    its visible set; rows with no visible entry are rejected.
    """
    if logits.array.ndim != 2:
        raise ShapeError(f"masked_softmax needs a matrix, got shape {logits.shape}")
    rows, cols = logits.shape
    if mask is None:
        m = np.ones((rows, cols), dtype=bool)
    else:
        m = _as_mask(mask, rows, cols)
        if not m.any(axis=1).all():
            raise DegenerateMaskError("softmax row with every position masked")
    shifted = np.where(m, logits.array, -np.inf)
    shifted = shifted - shifted.max(axis=1, keepdims=True)
    weights = np.exp(shifted)  # exact 0.0 at masked positions
    weights /= weights.sum(axis=1, keepdims=True)

    def backward(g):
        gw = g * weights
        return (gw - weights * gw.sum(axis=1, keepdims=True),)

    return _result(weights, (logits,), backward)


def softmax(logits: Tensor) -> Tensor:
    return masked_softmax(logits, None)


def masked_attention(q: Tensor, k: Tensor, v: Tensor, mask=None) -> Tensor:
    """Scaled dot-product attention; `mask` marks visible keys per query row."""
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError(f"query/key widths differ: {q.shape} vs {k.shape}")
    if k.shape[0] != v.shape[0]:
        raise ShapeError(f"key/value counts differ: {k.shape} vs {v.shape}")
    logits = matmul(q, transpose(k))
    scaled = _result(
        logits.array / np.sqrt(q.shape[-1]),
        (logits,),
        lambda g: (g / np.sqrt(q.shape[-1]),),
    )
    weights = masked_softmax(scaled, mask)
    return matmul(weights, v)


def softmax_cross_entropy(logits: Tensor, targets: Sequence[int]) -> Tensor:
    """Mean over rows of -log softmax(logits)[target], max-stabilized."""
    if logits.array.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy needs a matrix, got shape {logits.shape}")
    n, vocab = logits.shape
    idx = np.asarray(targets, dtype=np.intp)
    if idx.shape != (n,):
        raise ShapeError(f"expected {n} targets, got {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= vocab):
        raise IndexError(f"target index out of range for {vocab} classes")
    shifted = logits.array - logits.array.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    log_probs = shifted - log_z[:, None]
    values = np.array(-log_probs[np.arange(n), idx].mean())

    def backward(g):
        grad = np.exp(log_probs)
        grad[np.arange(n), idx] -= 1.0
        return (grad * (g / n),)

    return _result(values, (logits,), backward)


def l2_normalize(x: Tensor, eps: float = 1e-30) -> Tensor:
    """Scale rows (or a single vector) to unit Euclidean norm."""
    arr = x.array
    norm = np.sqrt((arr * arr).sum(axis=-1, keepdims=True) + eps)
    values = arr / norm

    def backward(g):
        dot = (g * values).sum(axis=-1, keepdims=True)
        return ((g - values * dot) / norm,)

    return _result(values, (x,), backward)
