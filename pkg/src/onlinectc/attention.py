"""Scaled dot-product / multi-head attention, positions and feed-forward blocks."""

from __future__ import annotations

import dataclasses
import math

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclasses.dataclass
class MultiHeadParams:
    """Projections for ``heads`` attention heads.

    Head ``h`` uses column block ``h*d_k:(h+1)*d_k`` of ``wq``/``wk``/``wv``,
    which is the per-head ``d_m x d_k`` projection stored side by side.
    """

    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    heads: int

    def __post_init__(self):
        d_m = self.wo.shape[0]
        if d_m % self.heads:
            raise ValueError(f"d_m={d_m} is not divisible by heads={self.heads}")
        for name in ("wq", "wk", "wv", "wo"):
            if getattr(self, name).shape != (d_m, d_m):
                raise ValueError(f"{name} must be {d_m}x{d_m}")

    @property
    def d_model(self):
        return self.wo.shape[0]

    @property
    def d_k(self):
        return self.d_model // self.heads


@dataclasses.dataclass
class FeedForwardParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor


@dataclasses.dataclass
class LayerNormParams:
    gain: Tensor
    bias: Tensor

    def __call__(self, x):
        return ad.layer_norm(x, self.gain, self.bias)


def _glorot(rng, fan_in, fan_out):
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-bound, bound, size=(fan_in, fan_out)), requires_grad=True)


def init_multi_head(rng, d_m, heads):
    return MultiHeadParams(*(_glorot(rng, d_m, d_m) for _ in range(4)), heads=heads)


def init_feed_forward(rng, d_m, d_ff):
    return FeedForwardParams(
        w1=_glorot(rng, d_m, d_ff),
        b1=Tensor(np.zeros(d_ff), requires_grad=True),
        w2=_glorot(rng, d_ff, d_m),
        b2=Tensor(np.zeros(d_m), requires_grad=True),
    )


def init_layer_norm(d_m):
    return LayerNormParams(
        Tensor(np.ones(d_m), requires_grad=True), Tensor(np.zeros(d_m), requires_grad=True)
    )


def scaled_dot_attention(q, k, v, mask=None, return_weights=False):
    """``softmax(q k^T / sqrt(d)) v`` with ``d`` the query width.

    ``mask`` (n x m, or broadcastable) marks allowed key positions. A query
    with no allowed key gets a zero output row.
    """
    d = q.shape[-1]
    if k.shape[-1] != d or k.shape[-2] != v.shape[-2]:
        raise ValueError(f"incompatible attention shapes q={q.shape} k={k.shape} v={v.shape}")
    logits = ad.matmul(q, k.transpose(*range(k.ndim - 2), k.ndim - 1, k.ndim - 2)) / math.sqrt(d)
    weights = ad.softmax_rows(logits, mask)
    out = ad.matmul(weights, v)
    return (out, weights) if return_weights else out


def _split_heads(x, heads):
    n, d_m = x.shape
    return x.reshape(n, heads, d_m // heads).transpose(1, 0, 2)


def multi_head_attention(params, q, k, v, mask=None):
    """Project, attend per head, concatenate heads, project with ``wo``."""
    h = params.heads
    qh = _split_heads(ad.matmul(q, params.wq), h)
    kh = _split_heads(ad.matmul(k, params.wk), h)
    vh = _split_heads(ad.matmul(v, params.wv), h)
    ctx = scaled_dot_attention(qh, kh, vh, mask)
    n = q.shape[0]
    return ad.matmul(ctx.transpose(1, 0, 2).reshape(n, params.d_model), params.wo)


def sinusoidal_positions(start_index, count, d_m):
    """Sine/cosine encodings for absolute positions ``start_index .. start_index+count-1``.

    Even columns carry sines and odd columns cosines, so position 0 is
    ``[0, 1, 0, 1, ...]``.
    """
    if start_index < 0:
        raise ValueError("start_index must be non-negative")
    pos = np.arange(start_index, start_index + count, dtype=np.float64)[:, None]
    rates = np.exp(-math.log(10000.0) * (np.arange(0, d_m, 2) / d_m))
    pe = np.zeros((count, d_m))
    pe[:, 0::2] = np.sin(pos * rates)
    pe[:, 1::2] = np.cos(pos * rates[: d_m // 2])
    return pe


def feed_forward(params, x):
    hidden = ad.relu(ad.matmul(x, params.w1) + params.b1)
    return ad.matmul(hidden, params.w2) + params.b2
