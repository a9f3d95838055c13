"""
Differentiable Layers
Elementwise, affine, normalization and loss primitives recorded on the tape
"""

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import expit

from services.autodiff import Tensor, constant, record
from services.errors import LabelError, ShapeError

logger = logging.getLogger(__name__)

TRAIN = 'train'
EVAL = 'eval'


def _check_mode(mode: str) -> None:
    if mode not in (TRAIN, EVAL):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")


# ================================================
# ELEMENTWISE & AFFINE
# ================================================

def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
    return record('add', a.data + b.data, (a, b), lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ")
    return record('mul', a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def add_constant(a: Tensor, c: float) -> Tensor:
    return record('add_constant', a.data + c, (a,), lambda g: (g,))


def scale(a: Tensor, c: float) -> Tensor:
    return record('scale', a.data * c, (a,), lambda g: (g * c,))


def scale_by(x: Tensor, factor: Tensor) -> Tensor:
    """x * factor for a single-element learnable factor"""
    if factor.size != 1:
        raise ShapeError(f"scale_by: factor must have one element, got {factor.shape}")
    f = float(factor.data.reshape(()))
    return record('scale_by', x.data * f, (x, factor),
                  lambda g: (g * f, np.array(np.sum(g * x.data)).reshape(factor.shape)))


def tensor_sum(a: Tensor) -> Tensor:
    return record('sum', np.array(a.data.sum()), (a,), lambda g: (np.full(a.shape, float(g)),))


def weighted_sum(a: Tensor, weights) -> Tensor:
    """Scalar sum(a * weights) against a constant weight array"""
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != a.shape:
        raise ShapeError(f"weighted_sum: weights {w.shape} vs tensor {a.shape}")
    return record('weighted_sum', np.array(np.sum(a.data * w)), (a,), lambda g: (float(g) * w,))


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """
    Affine map x @ weight + bias

    Args:
        x: (N, F_in)
        weight: (F_in, F_out)
        bias: (F_out,) or None
    """
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeError(f"linear: cannot multiply {x.shape} by {weight.shape}")
    out = x.data @ weight.data
    if bias is not None:
        if bias.shape != (weight.shape[1],):
            raise ShapeError(f"linear: bias {bias.shape} does not match {weight.shape[1]} outputs")
        out = out + bias.data
        inputs = (x, weight, bias)
    else:
        inputs = (x, weight)

    def backward_fn(g):
        grads = [g @ weight.data.T if x.requires_grad else None, x.data.T @ g]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return grads

    return record('linear', out, inputs, backward_fn)


def leaky_relu(x: Tensor, slope: float = 0.01) -> Tensor:
    slopes = np.where(x.data > 0, 1.0, slope)
    return record('leaky_relu', x.data * slopes, (x,), lambda g: (g * slopes,))


def sigmoid(x: Tensor) -> Tensor:
    s = expit(x.data)
    return record('sigmoid', s, (x,), lambda g: (g * s * (1.0 - s),))


def softplus(x: Tensor) -> Tensor:
    out = np.logaddexp(0.0, x.data)
    return record('softplus', out, (x,), lambda g: (g * expit(x.data),))


def dropout(x: Tensor, p: float, mode: str, rng: Optional[np.random.Generator] = None) -> Tensor:
    """Inverted dropout; identity in eval mode or when p == 0"""
    _check_mode(mode)
    if mode == EVAL or p <= 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in train mode needs a random generator")
    mask = (rng.random(x.shape) >= p) / (1.0 - p)
    return record('dropout', x.data * mask, (x,), lambda g: (g * mask,))


def take_rows(x: Tensor, index: np.ndarray) -> Tensor:
    index = np.asarray(index, dtype=np.int64)

    def backward_fn(g):
        grad = np.zeros_like(x.data)
        np.add.at(grad, index, g)
        return (grad,)

    return record('take_rows', x.data[index], (x,), backward_fn)


# ================================================
# NORMALIZATION
# ================================================

def normalize_rows(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Standardize every row over its features (biased variance)"""
    mu = x.data.mean(axis=1, keepdims=True)
    centered = x.data - mu
    inv_std = 1.0 / np.sqrt((centered ** 2).mean(axis=1, keepdims=True) + eps)
    xhat = centered * inv_std

    def backward_fn(g):
        g_mean = g.mean(axis=1, keepdims=True)
        gx_mean = (g * xhat).mean(axis=1, keepdims=True)
        return (inv_std * (g - g_mean - xhat * gx_mean),)

    return record('normalize_rows', xhat, (x,), backward_fn)


def row_affine(x: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    """x * gamma + beta with per-feature gamma and beta"""
    if gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeError(f"row_affine: gamma {gamma.shape} / beta {beta.shape} vs features {x.shape[1]}")
    return record('row_affine', x.data * gamma.data + beta.data, (x, gamma, beta),
                  lambda g: (g * gamma.data, (g * x.data).sum(axis=0), g.sum(axis=0)))


@dataclass
class BatchStats:
    """Running mean/variance buffers of one batch-norm layer"""

    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1


def batch_standardize(x: Tensor, stats: BatchStats, mode: str, eps: float = 1e-5,
                      rows: Optional[np.ndarray] = None) -> Tensor:
    """
    Standardize features with batch statistics (train) or running statistics (eval)

    Args:
        x: (N, F)
        stats: running buffers, updated in place in train mode
        mode: 'train' or 'eval'
        eps: variance guard
        rows: rows whose statistics define the batch (default: all rows)

    Returns:
        Standardized (N, F) tensor; every row uses the same statistics
    """
    _check_mode(mode)
    if mode == EVAL:
        inv_std = 1.0 / np.sqrt(stats.running_var + eps)
        return record('batch_standardize', (x.data - stats.running_mean) * inv_std, (x,),
                      lambda g: (g * inv_std,))

    rows = np.arange(x.shape[0]) if rows is None else np.asarray(rows, dtype=np.int64)
    if rows.size < 2:
        raise ShapeError(f"batch_standardize needs at least 2 batch rows in train mode, got {rows.size}")
    batch = x.data[rows]
    mu = batch.mean(axis=0)
    var = batch.var(axis=0)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv_std
    stats.running_mean *= 1.0 - stats.momentum
    stats.running_mean += stats.momentum * mu
    stats.running_var *= 1.0 - stats.momentum
    stats.running_var += stats.momentum * var

    def backward_fn(g):
        # mu and var depend only on the batch rows
        m = rows.size
        g_sum = g.sum(axis=0)
        gx_sum = (g * xhat).sum(axis=0)
        grad = g * inv_std
        xhat_batch = xhat[rows]
        np.add.at(grad, rows, -inv_std * (g_sum + xhat_batch * gx_sum) / m)
        return (grad,)

    return record('batch_standardize', xhat, (x,), backward_fn)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    return row_affine(normalize_rows(x, eps), gamma, beta)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, stats: BatchStats, mode: str,
               eps: float = 1e-5, rows: Optional[np.ndarray] = None) -> Tensor:
    return row_affine(batch_standardize(x, stats, mode, eps, rows), gamma, beta)


def conditional_layer_norm(x: Tensor, desc_embedding: Tensor, u_gamma: Tensor, u_beta: Tensor,
                           eps: float = 1e-5) -> Tensor:
    """
    Layer norm whose scale and shift are predicted per row from a descriptor

    gamma(d) = 1 + E(d) @ u_gamma and beta(d) = E(d) @ u_beta, so zero
    projections reduce to plain layer norm with unit scale and zero shift.

    Args:
        x: (N, F)
        desc_embedding: (N, D) encoded species descriptor of each row
        u_gamma, u_beta: (D, F) projections
    """
    if desc_embedding.shape[0] != x.shape[0]:
        raise ShapeError(f"conditional_layer_norm: {desc_embedding.shape[0]} descriptors for {x.shape[0]} rows")
    gamma = add_constant(linear(desc_embedding, u_gamma), 1.0)
    beta = linear(desc_embedding, u_beta)
    return add(mul(normalize_rows(x, eps), gamma), beta)


# ================================================
# LOSS
# ================================================

def check_binary(y: np.ndarray, what: str = 'labels') -> None:
    if y.size and not np.all((y == 0) | (y == 1)):
        raise LabelError(f"{what} must be binary (0/1)")


def bce_with_logits(z: Tensor, y) -> Tensor:
    """
    Mean binary cross-entropy over all (row, label) pairs, in stable form

    Args:
        z: (N, K) logits
        y: (N, K) binary targets

    Returns:
        Scalar loss tensor
    """
    y = np.asarray(y.data if isinstance(y, Tensor) else y, dtype=np.float64)
    if y.shape != z.shape:
        raise ShapeError(f"bce_with_logits: targets {y.shape} vs logits {z.shape}")
    check_binary(y, 'targets')
    count = max(z.size, 1)
    loss = np.array(np.sum(np.logaddexp(0.0, z.data) - y * z.data) / count)
    return record('bce_with_logits', loss, (z,), lambda g: (float(g) * (expit(z.data) - y) / count,))


__all__ = [
    'TRAIN', 'EVAL', 'BatchStats', 'add', 'mul', 'add_constant', 'scale', 'scale_by', 'tensor_sum',
    'weighted_sum', 'linear', 'leaky_relu', 'sigmoid', 'softplus', 'dropout', 'take_rows',
    'normalize_rows', 'row_affine', 'batch_standardize', 'layer_norm', 'batch_norm',
    'conditional_layer_norm', 'check_binary', 'bce_with_logits', 'constant',
]
