"""Shared building blocks: initializers, MLP, GRU cell, multi-head attention."""

from __future__ import annotations

from typing import Dict

import numpy as np

from statm import tensor as T
from statm.tensor import Tensor


def glorot(rng: np.random.Generator, shape, dtype=np.float32) -> np.ndarray:
    fan_in, fan_out = shape[0], shape[-1]
    limit = float(np.sqrt(6.0 / (fan_in + fan_out)))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def zeros(shape, dtype=np.float32) -> np.ndarray:
    return np.zeros(shape, dtype=dtype)


def ones(shape, dtype=np.float32) -> np.ndarray:
    return np.ones(shape, dtype=dtype)


def make_trainable(arrays: Dict[str, np.ndarray]) -> Dict[str, Tensor]:
    return {k: Tensor(v, requires_grad=True) for k, v in arrays.items()}


def linear(x: Tensor, p: Dict[str, Tensor], name: str) -> Tensor:
    out = T.matmul(x, p[f"{name}_w"])
    b = p.get(f"{name}_b")
    return T.add(out, b) if b is not None else out


def mlp2(x: Tensor, p: Dict[str, Tensor], prefix: str) -> Tensor:
    """One-hidden-layer MLP with relu."""
    h = T.relu(linear(x, p, f"{prefix}1"))
    return linear(h, p, f"{prefix}2")


def init_mlp2(rng, d_in: int, d_hidden: int, d_out: int, prefix: str, dtype=np.float32):
    return {
        f"{prefix}1_w": glorot(rng, (d_in, d_hidden), dtype),
        f"{prefix}1_b": zeros((d_hidden,), dtype),
        f"{prefix}2_w": glorot(rng, (d_hidden, d_out), dtype),
        f"{prefix}2_b": zeros((d_out,), dtype),
    }


def init_layer_norm(d: int, prefix: str, dtype=np.float32):
    return {f"{prefix}_g": ones((d,), dtype), f"{prefix}_b": zeros((d,), dtype)}


def layer_norm(x: Tensor, p: Dict[str, Tensor], prefix: str, eps: float = 1e-5) -> Tensor:
    return T.layer_norm(x, p[f"{prefix}_g"], p[f"{prefix}_b"], eps)


def init_gru(rng, d: int, prefix: str, dtype=np.float32):
    return {
        f"{prefix}_wx": glorot(rng, (d, 3 * d), dtype),
        f"{prefix}_wh": glorot(rng, (d, 3 * d), dtype),
        f"{prefix}_bx": zeros((3 * d,), dtype),
        f"{prefix}_bh": zeros((3 * d,), dtype),
    }


def gru_cell(x: Tensor, h: Tensor, p: Dict[str, Tensor], prefix: str) -> Tensor:
    """GRU update: gates z, r then candidate n; returns (1-z)*n + z*h."""
    d = h.shape[-1]
    gx = T.add(T.matmul(x, p[f"{prefix}_wx"]), p[f"{prefix}_bx"])
    gh = T.add(T.matmul(h, p[f"{prefix}_wh"]), p[f"{prefix}_bh"])
    z = T.sigmoid(T.add(gx[..., 0:d], gh[..., 0:d]))
    r = T.sigmoid(T.add(gx[..., d:2 * d], gh[..., d:2 * d]))
    n = T.tanh(T.add(gx[..., 2 * d:3 * d], T.mul(r, gh[..., 2 * d:3 * d])))
    one_minus_z = T.add(T.mul(z, -1.0), 1.0)
    return T.add(T.mul(one_minus_z, n), T.mul(z, h))


def init_attention(rng, d: int, key_dim: int, prefix: str, dtype=np.float32):
    return {
        f"{prefix}_q": glorot(rng, (d, key_dim), dtype),
        f"{prefix}_k": glorot(rng, (d, key_dim), dtype),
        f"{prefix}_v": glorot(rng, (d, key_dim), dtype),
        f"{prefix}_o": glorot(rng, (key_dim, d), dtype),
    }


def multi_head_attention(q_in: Tensor, kv_in: Tensor, p: Dict[str, Tensor],
                         prefix: str, heads: int) -> Tensor:
    """Scaled dot-product attention with `heads` heads and output projection.

    q_in: (..., Nq, D); kv_in: (..., Nk, D) sharing the leading axes.
    The attention application accumulates in float64 so the result is
    insensitive to the ordering of the keys (bitwise, after rounding).
    """
    kd = p[f"{prefix}_q"].shape[-1]
    dk = kd // heads
    q = T.matmul(q_in, p[f"{prefix}_q"])
    k = T.matmul(kv_in, p[f"{prefix}_k"])
    v = T.matmul(kv_in, p[f"{prefix}_v"])

    def split(x):
        lead = x.shape[:-2]
        x = T.reshape(x, (*lead, x.shape[-2], heads, dk))
        return T.swapaxes(x, -3, -2)

    qh, kh, vh = split(q), split(k), split(v)
    scores = T.mul(T.matmul(qh, T.swapaxes(kh, -1, -2)), dk ** -0.5)
    attn = T.softmax(scores, axis=-1)
    out = T.matmul(attn, vh, acc64=True)
    out = T.swapaxes(out, -3, -2)
    out = T.reshape(out, (*out.shape[:-2], kd))
    return T.matmul(out, p[f"{prefix}_o"])
