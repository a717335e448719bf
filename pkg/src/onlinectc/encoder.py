"""Chunked self-attention encoder with optional state reuse.

Chunk geometry (left/center/right context) is counted in input feature
frames; the front-end reduces time by 4, so every context size must be a
multiple of 4. Positional encodings use absolute reduced-frame indices, which
keeps cached keys/values consistent from one chunk to the next.
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
    feed_forward,
    init_feed_forward,
    init_layer_norm,
    init_multi_head,
    multi_head_attention,
    sinusoidal_positions,
)
from .autodiff import Tensor

SUBSAMPLE = 4
FRAME_SHIFT_MS = 10
ISOLATED = "isolated"
STATE_REUSE = "state_reuse"
MODES = (ISOLATED, STATE_REUSE)


class ChunkOrderError(RuntimeError):
    """A chunk was presented out of order for its session."""


@dataclasses.dataclass(frozen=True)
class ChunkConfig:
    left: int
    center: int
    right: int

    def __post_init__(self):
        if self.center < 1:
            raise ValueError("center context must be at least one frame")
        for name in ("left", "center", "right"):
            value = getattr(self, name)
            if value < 0 or value % SUBSAMPLE:
                raise ValueError(f"{name}={value} must be a non-negative multiple of {SUBSAMPLE}")

    @property
    def latency_ms(self):
        return self.right * FRAME_SHIFT_MS

    @property
    def reduced_left(self):
        return self.left // SUBSAMPLE

    @property
    def reduced_center(self):
        return self.center // SUBSAMPLE

    @property
    def reduced_right(self):
        return self.right // SUBSAMPLE


class ChunkSpan(NamedTuple):
    """Input-frame ranges ``[start, stop)`` of one chunk, clipped to the utterance."""

    index: int
    history: tuple[int, int]
    central: tuple[int, int]
    future: tuple[int, int]

    @property
    def window(self):
        return self.history[0], self.future[1]


def split_chunks(num_frames, config):
    if num_frames < 1:
        raise ValueError("an utterance needs at least one frame")
    spans = []
    for index, c0 in enumerate(range(0, num_frames, config.center)):
        c1 = min(c0 + config.center, num_frames)
        spans.append(
            ChunkSpan(
                index,
                (max(0, c0 - config.left), c0),
                (c0, c1),
                (c1, min(num_frames, c1 + config.right)),
            )
        )
    return spans


def receptive_field(config, layers, mode):
    """Left context (input frames) nominally visible to a chunk's outputs.

    With state reuse each layer reaches another ``left`` frames back through
    the cache. This is exact when ``left`` is a multiple of ``center``; the
    convolutional front-end adds ``FrontEnd.left_reach`` frames on top.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    return config.left * layers if mode == STATE_REUSE else config.left


def reduced_length(num_frames):
    return -(-num_frames // SUBSAMPLE)


@dataclasses.dataclass
class FrontEndParams:
    """Time-reducing front-end.

    ``kind="conv"``: two 3x3 stride-2 convolutions (padding 1) with ReLU,
    flattened over channels x frequency and projected to ``d_model``.
    ``kind="stack"``: each block of 4 frames is concatenated and projected,
    so a reduced frame depends on its own 4 input frames only.
    """

    kind: str
    proj_w: Tensor
    proj_b: Tensor
    conv1_w: Tensor | None = None
    conv1_b: Tensor | None = None
    conv2_w: Tensor | None = None
    conv2_b: Tensor | None = None

    @property
    def left_reach(self):
        # reduced frame j reads inputs 4j-3 .. 4j+3 through the two convs
        return 3 if self.kind == "conv" else 0

    @property
    def right_reach(self):
        return SUBSAMPLE - 1

    @property
    def lookahead(self):
        """Input frames read past the end of a reduced frame's own 4-frame block."""
        return self.right_reach - (SUBSAMPLE - 1)


@dataclasses.dataclass
class EncoderLayerParams:
    attn: MultiHeadParams
    ff: FeedForwardParams
    norm1: LayerNormParams
    norm2: LayerNormParams


@dataclasses.dataclass
class EncoderParams:
    front: FrontEndParams
    layers: list[EncoderLayerParams]
    feat_dim: int

    @property
    def d_model(self):
        return self.front.proj_w.shape[1]


def init_encoder(rng, feat_dim, d_model, heads, d_ff, num_layers, frontend="conv", channels=8):
    if num_layers < 1:
        raise ValueError("encoder needs at least one layer")
    if frontend == "conv":
        f2 = -(-(-(-feat_dim // 2)) // 2)
        s1 = math.sqrt(2.0 / 9)
        s2 = math.sqrt(2.0 / (9 * channels))
        proj_in = channels * f2
        front = FrontEndParams(
            kind="conv",
            proj_w=Tensor(rng.normal(0, math.sqrt(1.0 / proj_in), (proj_in, d_model)), True),
            proj_b=Tensor(np.zeros(d_model), True),
            conv1_w=Tensor(rng.normal(0, s1, (channels, 1, 3, 3)), True),
            conv1_b=Tensor(np.zeros(channels), True),
            conv2_w=Tensor(rng.normal(0, s2, (channels, channels, 3, 3)), True),
            conv2_b=Tensor(np.zeros(channels), True),
        )
    elif frontend == "stack":
        proj_in = SUBSAMPLE * feat_dim
        front = FrontEndParams(
            kind="stack",
            proj_w=Tensor(rng.normal(0, math.sqrt(1.0 / proj_in), (proj_in, d_model)), True),
            proj_b=Tensor(np.zeros(d_model), True),
        )
    else:
        raise ValueError(f"unknown front-end kind {frontend!r}")
    layers = [
        EncoderLayerParams(
            attn=init_multi_head(rng, d_model, heads),
            ff=init_feed_forward(rng, d_model, d_ff),
            norm1=init_layer_norm(d_model),
            norm2=init_layer_norm(d_model),
        )
        for _ in range(num_layers)
    ]
    return EncoderParams(front=front, layers=layers, feat_dim=feat_dim)


def front_end(params, features):
    """Map ``T x F`` features to ``ceil(T/4) x d_model`` (no positional encoding)."""
    features = features.data if isinstance(features, Tensor) else np.asarray(features, np.float64)
    t, f = features.shape
    if f != params.feat_dim:
        raise ValueError(f"feature dim {f} does not match model feature dim {params.feat_dim}")
    if t < 1:
        raise ValueError("front-end needs at least one input frame")
    fp = params.front
    if fp.kind == "stack":
        pad = reduced_length(t) * SUBSAMPLE - t
        stacked = np.pad(features, ((0, pad), (0, 0))).reshape(-1, SUBSAMPLE * f)
        return ad.matmul(Tensor(stacked), fp.proj_w) + fp.proj_b
    x = Tensor(features[None])
    x = ad.relu(ad.conv2d(x, fp.conv1_w, fp.conv1_b))
    x = ad.relu(ad.conv2d(x, fp.conv2_w, fp.conv2_b))
    c, t2, f2 = x.shape
    x = x.transpose(1, 0, 2).reshape(t2, c * f2)
    return ad.matmul(x, fp.proj_w) + fp.proj_b


def _embed_window(params, features, start, stop):
    h = front_end(params, features[start:stop])
    pe = sinusoidal_positions(start // SUBSAMPLE, h.shape[0], params.d_model)
    return h + pe


def encoder_layer(p, x, kv, dropout_rate=0.0, rng=None):
    a = multi_head_attention(p.attn, x, kv, kv)
    x = p.norm1(x + ad.dropout(a, dropout_rate, rng))
    f = feed_forward(p.ff, x)
    return p.norm2(x + ad.dropout(f, dropout_rate, rng))


@dataclasses.dataclass
class ChunkCache:
    """Per-session encoder state.

    ``states[l]`` holds the inputs of layer ``l`` at the most recent
    ``left / 4`` central positions as plain arrays, i.e. gradient-severed.
    ``computed_positions`` logs, per encoded chunk, how many query positions
    each layer evaluated.
    """

    states: list[np.ndarray]
    next_index: int = 0
    newest_position: int = -1
    computed_positions: list[int] = dataclasses.field(default_factory=list)

    @classmethod
    def empty(cls, num_layers, d_model):
        return cls([np.zeros((0, d_model)) for _ in range(num_layers)])


def encode_chunk(params, cache, features, span, config, mode, dropout_rate=0.0, rng=None):
    """Encode one chunk and return its central outputs (reduced frames).

    ``features`` must contain at least the input frames up to
    ``span.future[1]``. The cache is updated in place with this chunk's
    central states for every layer.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    if span.index != cache.next_index:
        raise ChunkOrderError(f"expected chunk {cache.next_index}, got chunk {span.index}")
    if len(features) < span.future[1]:
        raise ValueError("chunk window extends past the supplied frames")
    c0, c1 = span.central
    r0, r1 = c0 // SUBSAMPLE, reduced_length(c1)
    n_central = r1 - r0

    if mode == ISOLATED:
        w0, w1 = span.window
        x = _embed_window(params, features, w0, w1)
        offset = r0 - w0 // SUBSAMPLE
        for p in params.layers:
            cache.computed_positions.append(x.shape[0])
            x = encoder_layer(p, x, x, dropout_rate, rng)
        out = x[offset : offset + n_central]
    else:
        margin = -(-params.front.left_reach // SUBSAMPLE) * SUBSAMPLE
        w0 = max(0, c0 - margin)
        x = _embed_window(params, features, w0, span.future[1])
        if w0 < c0:
            x = x[(c0 - w0) // SUBSAMPLE :]
        keep = config.reduced_left
        for l, p in enumerate(params.layers):
            stored = cache.states[l]
            kv = ad.concat([Tensor(stored), x]) if len(stored) else x
            fresh = x.data[:n_central]
            cache.states[l] = np.concatenate([stored, fresh])[-keep:] if keep else stored[:0]
            cache.computed_positions.append(x.shape[0])
            x = encoder_layer(p, x, kv, dropout_rate, rng)
        out = x[:n_central]
    cache.next_index += 1
    cache.newest_position = r1 - 1
    return out


def encode(params, features, config, mode=STATE_REUSE, dropout_rate=0.0, rng=None, cache=None):
    """Chunk-by-chunk encoding of a whole utterance; returns ``T' x d_model``."""
    features = np.asarray(features, dtype=np.float64)
    if cache is None:
        cache = ChunkCache.empty(len(params.layers), params.d_model)
    outs = [
        encode_chunk(params, cache, features, span, config, mode, dropout_rate, rng)
        for span in split_chunks(len(features), config)
    ]
    return ad.concat(outs) if len(outs) > 1 else outs[0]


class EncoderStream:
    """Incremental encoder: frames go in, central outputs come out.

    A chunk is encoded as soon as its future context has arrived; at
    :meth:`finish` the remaining chunks are encoded with clipped contexts.
    The chunk boundaries and thus the outputs are identical to :func:`encode`.
    """

    def __init__(self, params, config, mode=STATE_REUSE):
        self.params = params
        self.config = config
        self.mode = mode
        self.cache = ChunkCache.empty(len(params.layers), params.d_model)
        self._frames = np.zeros((0, params.feat_dim))
        self.closed = False

    @property
    def frames_received(self):
        return len(self._frames)

    def _ready_spans(self, total):
        cfg = self.config
        start = self.cache.next_index * cfg.center
        while start < total:
            c1 = start + cfg.center
            if not self.closed and c1 + cfg.right > total:
                break
            c1 = min(c1, total)
            yield ChunkSpan(
                self.cache.next_index,
                (max(0, start - cfg.left), start),
                (start, c1),
                (c1, min(total, c1 + cfg.right)),
            )
            start += cfg.center

    def _drain(self):
        outs = []
        for span in self._ready_spans(len(self._frames)):
            outs.append(encode_chunk(self.params, self.cache, self._frames, span, self.config, self.mode))
        return outs

    def push(self, frames):
        if self.closed:
            raise RuntimeError("stream already finished")
        frames = np.asarray(frames, dtype=np.float64).reshape(-1, self.params.feat_dim)
        self._frames = np.concatenate([self._frames, frames])
        return self._drain()

    def finish(self):
        self.closed = True
        if len(self._frames) == 0:
            return []
        return self._drain()
