"""Self-attention decoder with monotonic truncated attention (MTA).

Training evaluates the expected attention over the whole encoder output,
``A = P * cumprod_exclusive(1 - P)``. Decoding scans the truncation
probabilities of one query row left to right and stops at the first encoder
output, at or after the previous end-point, whose probability exceeds 0.5.
"""

from __future__ import annotations

import dataclasses
import math
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from .attention import (
    FeedForwardParams,
    LayerNormParams,
    MultiHeadParams,
    _glorot,
    feed_forward,
    init_feed_forward,
    init_layer_norm,
    init_multi_head,
    multi_head_attention,
    sinusoidal_positions,
)
from .autodiff import Tensor

R_INIT = -4.0


class StreamInconsistencyError(RuntimeError):
    """Decoder state points past the end of a closed encoder stream."""


class _NeedMoreOutputs:
    def __repr__(self):
        return "NEED_MORE"

    def __bool__(self):
        return False


NEED_MORE = _NeedMoreOutputs()
"""Returned when a truncation end-point lies beyond the encoder outputs seen so far."""


@dataclasses.dataclass
class MtaParams:
    wq: Tensor
    wk: Tensor
    wv: Tensor
    r: Tensor  # shape (1,)

    @property
    def d_model(self):
        return self.wq.shape[0]


@dataclasses.dataclass
class DecoderLayerParams:
    self_attn: MultiHeadParams
    mta: MtaParams
    ff: FeedForwardParams
    norm1: LayerNormParams
    norm2: LayerNormParams
    norm3: LayerNormParams


@dataclasses.dataclass
class DecoderParams:
    embed: Tensor
    layers: list[DecoderLayerParams]
    out_w: Tensor
    out_b: Tensor

    @property
    def d_model(self):
        return self.embed.shape[1]

    @property
    def vocab_size(self):
        return self.embed.shape[0]


def init_mta(rng, d_model, r_init=R_INIT):
    return MtaParams(
        _glorot(rng, d_model, d_model),
        _glorot(rng, d_model, d_model),
        _glorot(rng, d_model, d_model),
        Tensor(np.array([r_init]), requires_grad=True),
    )


def init_decoder(rng, vocab_size, d_model, heads, d_ff, num_layers):
    layers = [
        DecoderLayerParams(
            self_attn=init_multi_head(rng, d_model, heads),
            mta=init_mta(rng, d_model),
            ff=init_feed_forward(rng, d_model, d_ff),
            norm1=init_layer_norm(d_model),
            norm2=init_layer_norm(d_model),
            norm3=init_layer_norm(d_model),
        )
        for _ in range(num_layers)
    ]
    return DecoderParams(
        embed=Tensor(rng.normal(0, 1.0, (vocab_size, d_model)), requires_grad=True),
        layers=layers,
        out_w=_glorot(rng, d_model, vocab_size),
        out_b=Tensor(np.zeros(vocab_size), requires_grad=True),
    )


def mta_train_forward(params, q, k, v, noise=False, rng=None):
    """Expected-attention MTA over all keys.

    Returns ``(context, P)`` where ``P[i, j]`` is the probability of
    truncating at key ``j`` for query ``i``. With ``noise=True`` standard
    Gaussian noise is added to the pre-sigmoid energies (training only).
    """
    d = params.d_model
    qp = ad.matmul(q, params.wq)
    kp = ad.matmul(k, params.wk)
    energy = ad.matmul(qp, kp.T) / math.sqrt(d) + params.r
    if noise:
        if rng is None:
            raise ValueError("noise requires an rng")
        energy = energy + rng.standard_normal(energy.shape)
    p = ad.sigmoid(energy)
    weights = p * ad.cumprod_exclusive_rows(1.0 - p)
    context = ad.matmul(ad.matmul(weights, v), params.wv)
    return context, p


class EncoderMemory:
    """Decoder-side view of the encoder outputs that have arrived so far.

    Outputs are appended in blocks (one block per encoded chunk). MTA scans
    block by block, so offline and streaming decoding evaluate exactly the
    same array shapes. ``max_read`` records the highest output index (0-based,
    exclusive) any scan has touched.
    """

    def __init__(self, d_model):
        self.d_model = d_model
        self.blocks: list[np.ndarray] = []
        self.bounds: list[tuple[int, int]] = []
        self.closed = False
        self.max_read = 0
        self._proj: dict[tuple[int, int], tuple[np.ndarray, np.ndarray]] = {}

    def __len__(self):
        return self.bounds[-1][1] if self.bounds else 0

    def append(self, outputs):
        if self.closed:
            raise RuntimeError("encoder stream already closed")
        outputs = outputs.data if isinstance(outputs, Tensor) else np.asarray(outputs, np.float64)
        if len(outputs) == 0:
            return
        start = len(self)
        self.blocks.append(outputs)
        self.bounds.append((start, start + len(outputs)))

    def close(self):
        self.closed = True

    def projected(self, layer, block, mta):
        """Per-layer ``(h W_k, h W_v)`` for one block, computed once."""
        key = (layer, block)
        if key not in self._proj:
            h = self.blocks[block]
            self._proj[key] = (h @ mta.wk.data, h @ mta.wv.data)
        self.max_read = max(self.max_read, self.bounds[block][1])
        return self._proj[key]

    def full(self):
        if not self.blocks:
            return np.zeros((0, self.d_model))
        self.max_read = len(self)
        return np.concatenate(self.blocks)


class Truncation(NamedTuple):
    endpoint: int  # 1-based index of the last attended encoder output
    context: np.ndarray
    weights: np.ndarray  # a_{i,1..endpoint}
    end_of_stream: bool


@dataclasses.dataclass(frozen=True)
class TruncationState:
    """Per-layer end-points (1-based) of the most recent decoder step."""

    endpoints: tuple[int, ...]
    step: int = 0

    @classmethod
    def initial(cls, num_layers):
        return cls((1,) * num_layers, 0)

    @property
    def receptive_field(self):
        return max(self.endpoints)


def mta_decode_step(mta, query, memory, layer, prev_endpoint):
    """Find this step's end-point for one layer and attend up to it.

    ``query`` is the layer's ``d_model`` query vector. Returns a
    :class:`Truncation` or ``NEED_MORE`` when the stream is still open and no
    probability beyond ``prev_endpoint`` exceeds 0.5 yet.
    """
    d = mta.d_model
    qp = query @ mta.wq.data
    r = float(mta.r.data[0])
    total = len(memory)
    if memory.closed and prev_endpoint > max(total, 1):
        raise StreamInconsistencyError(
            f"previous end-point {prev_endpoint} beyond closed stream of {total} outputs"
        )
    carry = 1.0
    probs, weights, values = [], [], []
    for b, (start, stop) in enumerate(memory.bounds):
        kp, vp = memory.projected(layer, b, mta)
        p = ad._sigmoid(kp @ qp / math.sqrt(d) + r)
        excl = np.cumprod(np.concatenate(([carry], 1.0 - p)))
        a = p * excl[:-1]
        carry = excl[-1]
        # 1-based global index j = start + local + 1 must satisfy j >= prev_endpoint
        lo = max(0, prev_endpoint - 1 - start)
        hits = np.flatnonzero(p[lo:] > 0.5)
        if len(hits):
            cut = lo + int(hits[0]) + 1
            weights.append(a[:cut])
            values.append(vp[:cut])
            w = np.concatenate(weights)
            return Truncation(start + cut, w @ np.concatenate(values), w, False)
        weights.append(a)
        values.append(vp)
    if not memory.closed:
        return NEED_MORE
    if total == 0:
        return Truncation(1, np.zeros(d), np.zeros(0), True)
    w = np.concatenate(weights)
    return Truncation(total, w @ np.concatenate(values), w, True)


def _embed(params, tokens, start=0):
    x = ad.embedding(params.embed, tokens)
    return x + sinusoidal_positions(start, len(tokens), params.d_model)


def causal_mask(n):
    return np.tril(np.ones((n, n), dtype=bool))


def masked_self_attention(params, y):
    """Multi-head self-attention where position ``p`` sees positions ``<= p``."""
    return multi_head_attention(params, y, y, y, causal_mask(y.shape[0]))


def decoder_train_forward(params, tokens, enc_out, noise=False, rng=None, dropout_rate=0.0):
    """Teacher-forced decoder pass.

    ``tokens`` are the right-shifted labels (starting with sos). Returns the
    ``len(tokens) x vocab`` log-probabilities and the per-layer truncation
    probability matrices.
    """
    drop_rng = rng if dropout_rate > 0 else None
    x = _embed(params, tokens)
    probs = []
    for p in params.layers:
        x = p.norm1(x + ad.dropout(masked_self_attention(p.self_attn, x), dropout_rate, drop_rng))
        ctx, pm = mta_train_forward(p.mta, x, enc_out, enc_out, noise=noise, rng=rng)
        probs.append(pm)
        x = p.norm2(x + ad.dropout(ctx, dropout_rate, drop_rng))
        x = p.norm3(x + ad.dropout(feed_forward(p.ff, x), dropout_rate, drop_rng))
    return ad.log_softmax(ad.matmul(x, params.out_w) + params.out_b), probs


class DecoderCache(NamedTuple):
    """Inputs of every decoder layer at all positions decoded so far."""

    layer_inputs: tuple[np.ndarray, ...]

    @classmethod
    def empty(cls, num_layers, d_model):
        return cls(tuple(np.zeros((0, d_model)) for _ in range(num_layers)))

    @property
    def length(self):
        return len(self.layer_inputs[0])


class StepResult(NamedTuple):
    log_probs: np.ndarray
    state: TruncationState
    cache: DecoderCache
    truncations: tuple[Truncation, ...]
    queries: tuple[np.ndarray, ...]


def _row_mha(p, x, keys):
    # single query row against all cached rows: causal by construction
    return multi_head_attention(p, Tensor(x[None]), Tensor(keys), Tensor(keys)).data[0]


def decoder_step(params, token, memory, state, cache):
    """Advance one hypothesis by the token at the end of its prefix.

    ``token`` is the newest prefix token (sos on the first step). Returns a
    :class:`StepResult` with next-token log-probabilities, or ``NEED_MORE``.
    The call has no side effects other than memory instrumentation, so a
    suspended step can simply be retried after more outputs arrive.
    """
    pos = cache.length
    x = params.embed.data[token] + sinusoidal_positions(pos, 1, params.d_model)[0]
    new_inputs, truncs, queries, endpoints = [], [], [], []
    for l, p in enumerate(params.layers):
        keys = np.concatenate([cache.layer_inputs[l], x[None]])
        new_inputs.append(keys)
        y = p.norm1(Tensor(x + _row_mha(p.self_attn, x, keys))).data
        tr = mta_decode_step(p.mta, y, memory, l, state.endpoints[l])
        if tr is NEED_MORE:
            return NEED_MORE
        truncs.append(tr)
        queries.append(y)
        endpoints.append(tr.endpoint)
        y = p.norm2(Tensor(y + tr.context)).data
        x = p.norm3(Tensor(y + feed_forward(p.ff, Tensor(y[None])).data[0])).data
    logits = x @ params.out_w.data + params.out_b.data
    log_probs = logits - logits.max()
    log_probs = log_probs - np.log(np.exp(log_probs).sum())
    return StepResult(
        log_probs,
        TruncationState(tuple(endpoints), state.step + 1),
        DecoderCache(tuple(new_inputs)),
        tuple(truncs),
        tuple(queries),
    )
