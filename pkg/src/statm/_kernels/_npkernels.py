"""Pure-NumPy kernels: the reference semantics for the compiled twin.

Every function here has a drop-in Cython counterpart in ``_ckernels``.
Reductions accumulate in float64 regardless of the input dtype so that
results are independent of the summation order numpy happens to pick,
which is what makes slot-permutation equivariance bit-exact upstream.

Shape conventions: rowwise kernels take a C-contiguous 2-D array
(rows, n) and reduce over the last axis; elementwise kernels take any
contiguous array.
"""

from __future__ import annotations

import numpy as np

BACKEND = "numpy"


def softmax_fwd(x: np.ndarray) -> np.ndarray:
    m = x.max(axis=-1, keepdims=True)
    e = np.exp((x - m).astype(np.float64))
    d = e.sum(axis=-1, keepdims=True)
    return (e / d).astype(x.dtype)


def softmax_bwd(y: np.ndarray, g: np.ndarray) -> np.ndarray:
    y64 = y.astype(np.float64)
    g64 = g.astype(np.float64)
    s = (y64 * g64).sum(axis=-1, keepdims=True)
    return (y64 * (g64 - s)).astype(y.dtype)


def layer_norm_fwd(x, gain, bias, eps):
    """Returns (y, mean, rstd); mean/rstd are float64 per-row stats."""
    x64 = x.astype(np.float64)
    mu = x64.mean(axis=-1, keepdims=True)
    d = x64 - mu
    var = (d * d).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    y = (d * rstd * gain.astype(np.float64) + bias.astype(np.float64)).astype(x.dtype)
    return y, mu, rstd


def layer_norm_bwd(x, gain, mu, rstd, g):
    x64 = x.astype(np.float64)
    g64 = g.astype(np.float64)
    xhat = (x64 - mu) * rstd
    dxhat = g64 * gain.astype(np.float64)
    m1 = dxhat.mean(axis=-1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
    gx = (rstd * (dxhat - m1 - xhat * m2)).astype(x.dtype)
    ggain = (g64 * xhat).sum(axis=0).astype(x.dtype)
    gbias = g64.sum(axis=0).astype(x.dtype)
    return gx, ggain, gbias


def relu_fwd(x):
    return np.maximum(x, 0)


def relu_bwd(y, g):
    return np.where(y > 0, g, 0).astype(y.dtype)


def sigmoid_fwd(x):
    x64 = x.astype(np.float64)
    out = np.empty_like(x64)
    pos = x64 >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x64[pos]))
    e = np.exp(x64[~pos])
    out[~pos] = e / (1.0 + e)
    return out.astype(x.dtype)


def sigmoid_bwd(y, g):
    y64 = y.astype(np.float64)
    return (g.astype(np.float64) * y64 * (1.0 - y64)).astype(y.dtype)


def tanh_fwd(x):
    return np.tanh(x.astype(np.float64)).astype(x.dtype)


def tanh_bwd(y, g):
    y64 = y.astype(np.float64)
    return (g.astype(np.float64) * (1.0 - y64 * y64)).astype(y.dtype)


def softplus_fwd(x):
    x64 = x.astype(np.float64)
    return np.where(x64 > 30.0, x64, np.log1p(np.exp(np.minimum(x64, 30.0)))).astype(x.dtype)


def softplus_bwd(x, g):
    return (g.astype(np.float64) * sigmoid_fwd(x).astype(np.float64)).astype(x.dtype)
