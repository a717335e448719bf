"""Model configuration, initialisation and flat parameter naming."""

from __future__ import annotations

import dataclasses

import numpy as np

from . import autodiff as ad
from .attention import _glorot
from .autodiff import Tensor
from .encoder import STATE_REUSE, ChunkConfig, EncoderParams, encode, init_encoder
from .mta import DecoderParams, init_decoder


@dataclasses.dataclass
class ModelConfig:
    """Model dimensions and chunk geometry.

    Vocabulary layout: id 0 is the CTC blank, the last id is the shared
    sos/eos symbol, everything in between is an output token.
    """

    feat_dim: int = 16
    vocab_size: int = 8
    d_model: int = 32
    heads: int = 2
    d_ff: int = 64
    enc_layers: int = 2
    dec_layers: int = 2
    frontend: str = "conv"
    conv_channels: int = 4
    chunk_left: int = 16
    chunk_center: int = 16
    chunk_right: int = 16
    encoder_mode: str = STATE_REUSE

    @classmethod
    def full_size(cls, feat_dim=83, vocab_size=3655, **overrides):
        """Full-size preset: 12/6 layers, d_model 256, 4 heads, FF 2048, 64/64/64 chunks."""
        base = dict(
            feat_dim=feat_dim,
            vocab_size=vocab_size,
            d_model=256,
            heads=4,
            d_ff=2048,
            enc_layers=12,
            dec_layers=6,
            conv_channels=256,
            chunk_left=64,
            chunk_center=64,
            chunk_right=64,
        )
        base.update(overrides)
        return cls(**base)

    @property
    def chunk(self):
        return ChunkConfig(self.chunk_left, self.chunk_center, self.chunk_right)

    @property
    def blank(self):
        return 0

    @property
    def eos(self):
        return self.vocab_size - 1

    sos = eos

    def to_manifest(self):
        return {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}

    @classmethod
    def from_manifest(cls, values):
        kwargs = {}
        for f in dataclasses.fields(cls):
            if f.name in values:
                raw = values[f.name]
                kwargs[f.name] = raw if f.type == "str" else int(raw)
        return cls(**kwargs)


@dataclasses.dataclass
class Model:
    config: ModelConfig
    encoder: EncoderParams
    decoder: DecoderParams
    ctc_w: Tensor
    ctc_b: Tensor

    def parameters(self):
        return named_parameters(self)

    def encode(self, features, mode=None, dropout_rate=0.0, rng=None):
        return encode(
            self.encoder, features, self.config.chunk, mode or self.config.encoder_mode, dropout_rate, rng
        )

    def ctc_log_probs(self, enc_out):
        return ad.log_softmax(ad.matmul(enc_out, self.ctc_w) + self.ctc_b)


def init_model(config, seed=0):
    rng = np.random.default_rng(seed)
    enc = init_encoder(
        rng,
        config.feat_dim,
        config.d_model,
        config.heads,
        config.d_ff,
        config.enc_layers,
        frontend=config.frontend,
        channels=config.conv_channels,
    )
    dec = init_decoder(rng, config.vocab_size, config.d_model, config.heads, config.d_ff, config.dec_layers)
    return Model(
        config=config,
        encoder=enc,
        decoder=dec,
        ctc_w=_glorot(rng, config.d_model, config.vocab_size),
        ctc_b=Tensor(np.zeros(config.vocab_size), requires_grad=True),
    )


def named_parameters(obj, prefix=""):
    """Flatten nested parameter dataclasses into ``{"a.b.0.c": Tensor}``."""
    out = {}
    if isinstance(obj, Tensor):
        out[prefix] = obj
    elif dataclasses.is_dataclass(obj):
        for f in dataclasses.fields(obj):
            if f.name == "config":
                continue
            out.update(named_parameters(getattr(obj, f.name), f"{prefix}.{f.name}" if prefix else f.name))
    elif isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj):
            out.update(named_parameters(item, f"{prefix}.{i}"))
    return out
