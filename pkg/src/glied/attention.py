"""Attention building blocks: scaled dot-product heads, the fused multi-head
layer, the residual/dropout/layer-norm wrapper and the position-wise
feed-forward block.

Masks are plain boolean arrays where True marks an attendable key.
"""
from __future__ import annotations

import math

import numpy as np

from . import autograd as ag
from .autograd import Tensor

MASK_PENALTY = -1e30


class DegenerateMaskError(ValueError):
    pass


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class Linear:
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        self.w = ag.parameter(glorot(rng, d_in, d_out))
        self.b = ag.parameter(np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return ag.linear(x, self.w, self.b)

    def named_parameters(self, prefix: str):
        yield f"{prefix}.w", self.w
        if self.b is not None:
            yield f"{prefix}.b", self.b


class MultiHeadParams:
    """Fused per-head projections: column block i of each matrix is head i."""

    def __init__(self, d_h: int, n_heads: int, rng: np.random.Generator):
        if n_heads < 1 or d_h % n_heads:
            raise ValueError(f"head count {n_heads} must divide hidden size {d_h}")
        self.d_h = d_h
        self.n_heads = n_heads
        self.d_k = d_h // n_heads
        self.q = Linear(d_h, d_h, rng)
        self.k = Linear(d_h, d_h, rng)
        self.v = Linear(d_h, d_h, rng)
        self.out = Linear(d_h, d_h, rng)

    def named_parameters(self, prefix: str):
        for part in ("q", "k", "v", "out"):
            yield from getattr(self, part).named_parameters(f"{prefix}.{part}")


class GBlockParams:
    def __init__(self, d_h: int, dropout: float = 0.1):
        self.gain = ag.parameter(np.ones(d_h))
        self.bias = ag.parameter(np.zeros(d_h))
        self.dropout = dropout

    def named_parameters(self, prefix: str):
        yield f"{prefix}.gain", self.gain
        yield f"{prefix}.bias", self.bias


class FeedForwardParams:
    def __init__(self, d_h: int, d_f: int, rng: np.random.Generator):
        self.inner = Linear(d_h, d_f, rng)
        self.outer = Linear(d_f, d_h, rng)

    def named_parameters(self, prefix: str):
        yield from self.inner.named_parameters(f"{prefix}.inner")
        yield from self.outer.named_parameters(f"{prefix}.outer")


class PostProcessParams:
    """F plus the two residual wrappers around it."""

    def __init__(self, d_h: int, d_f: int, dropout: float, rng: np.random.Generator):
        self.ff = FeedForwardParams(d_h, d_f, rng)
        self.g_inner = GBlockParams(d_h, dropout)
        self.g_outer = GBlockParams(d_h, dropout)

    def named_parameters(self, prefix: str):
        yield from self.ff.named_parameters(f"{prefix}.ff")
        yield from self.g_inner.named_parameters(f"{prefix}.g_inner")
        yield from self.g_outer.named_parameters(f"{prefix}.g_outer")


# ---------------------------------------------------------------------------
# masks


def causal_mask(size: int) -> np.ndarray:
    if size < 1:
        raise DegenerateMaskError("causal mask needs a positive size")
    return np.tril(np.ones((size, size), dtype=bool))


def padding_mask(lengths, k: int) -> np.ndarray:
    lengths = np.asarray(lengths, dtype=np.int64)
    if (lengths < 1).any():
        raise DegenerateMaskError("zero-length source cannot be attended")
    if (lengths > k).any():
        raise ValueError(f"source length exceeds padded size {k}")
    return np.arange(k)[None, :] < lengths[:, None]


def make_mask(kind: str, lengths_or_size, k: int | None = None) -> np.ndarray | None:
    if kind == "causal":
        return causal_mask(int(lengths_or_size))
    if kind == "padding":
        if k is None:
            raise ValueError("padding mask needs the padded key count k")
        return padding_mask(lengths_or_size, k)
    if kind == "none":
        return None
    raise ValueError(f"unknown mask kind {kind!r}")


def _mask_bias(mask: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    full = np.broadcast_to(mask, shape)
    if not full.any(axis=-1).all():
        raise DegenerateMaskError("a query row has no attendable key")
    return np.where(full, 0.0, MASK_PENALTY)


# ---------------------------------------------------------------------------
# attention


def attend_head(q: Tensor, k: Tensor, v: Tensor, wq: Tensor, wk: Tensor, wv: Tensor,
                mask: np.ndarray | None = None) -> tuple[Tensor, Tensor]:
    """One scaled dot-product head on unbatched inputs (d_l x d_h, k x d_h)."""
    qp = ag.matmul(q, wq)
    kp = ag.matmul(k, wk)
    vp = ag.matmul(v, wv)
    scores = ag.matmul(qp, ag.transpose(kp)) * (1.0 / math.sqrt(wq.shape[1]))
    if mask is not None:
        scores = ag.add_const(scores, _mask_bias(mask, scores.shape))
    weights = ag.softmax(scores, -1)
    return ag.matmul(weights, vp), weights


def multi_head(q: Tensor, k: Tensor, v: Tensor, params: MultiHeadParams,
               mask: np.ndarray | None = None) -> tuple[Tensor, np.ndarray]:
    """Multi-head attention; returns the output and per-head weights.

    Inputs are (B, Tq, d_h) / (B, Tk, d_h), or unbatched 2-D.  ``mask``
    broadcasts against (B, Tq, Tk).  Weights come back as (B, n, Tq, Tk).
    """
    unbatched = q.ndim == 2
    if unbatched:
        q, k, v = (ag.reshape(t, (1,) + t.shape) for t in (q, k, v))
        if mask is not None:
            mask = mask[None]
    b, tq, d = q.shape
    tk = k.shape[1]
    n, dk = params.n_heads, params.d_k
    qh = ag.transpose(ag.reshape(params.q(q), (b, tq, n, dk)), (0, 2, 1, 3))
    kh = ag.transpose(ag.reshape(params.k(k), (b, tk, n, dk)), (0, 2, 3, 1))
    vh = ag.transpose(ag.reshape(params.v(v), (b, tk, n, dk)), (0, 2, 1, 3))
    scores = ag.bmm(qh, kh) * (1.0 / math.sqrt(dk))
    if mask is not None:
        scores = ag.add_const(scores, _mask_bias(mask[:, None] if mask.ndim == 3 else mask, scores.shape))
    weights = ag.softmax(scores, -1)
    ctx = ag.reshape(ag.transpose(ag.bmm(weights, vh), (0, 2, 1, 3)), (b, tq, d))
    out = params.out(ctx)
    w = weights.data
    if unbatched:
        out = ag.reshape(out, (tq, d))
        w = w[0]
    return out, w


def g_block(new_value: Tensor, residual: Tensor, params: GBlockParams, training: bool = False,
            rng: np.random.Generator | None = None) -> Tensor:
    """layer_norm(residual + dropout(new_value))."""
    if new_value.shape != residual.shape:
        raise ag.ShapeError(f"g_block: {new_value.shape} vs residual {residual.shape}")
    dropped = ag.dropout(new_value, params.dropout, training, rng)
    return ag.layer_norm(ag.add(residual, dropped), params.gain, params.bias)


def feed_forward(x: Tensor, params: FeedForwardParams) -> Tensor:
    return params.outer(ag.relu(params.inner(x)))


def post_process(c: Tensor, original: Tensor, params: PostProcessParams, training: bool = False,
                 rng: np.random.Generator | None = None) -> Tensor:
    """G(G(F(c), c), original)."""
    if c.shape != original.shape:
        raise ag.ShapeError(f"post_process: {c.shape} vs residual {original.shape}")
    inner = g_block(feed_forward(c, params.ff), c, params.g_inner, training, rng)
    return g_block(inner, original, params.g_outer, training, rng)
