"""Streaming CTC/attention speech recognition on numpy.

Chunked self-attention encoder with state reuse, a decoder whose
encoder-decoder attention is monotonic and truncated, CTC scoring, and a
joint beam search that runs while encoder chunks stream in.
"""

from .decoding import DecodeConfig, StreamSession, decode_offline, decode_streaming, dwjd_run
from .encoder import ISOLATED, STATE_REUSE, ChunkConfig, EncoderStream, receptive_field, split_chunks
from .model import ModelConfig, init_model
from .training import TrainConfig, joint_loss, train

__all__ = [
    "ChunkConfig",
    "DecodeConfig",
    "EncoderStream",
    "ISOLATED",
    "ModelConfig",
    "STATE_REUSE",
    "StreamSession",
    "TrainConfig",
    "decode_offline",
    "decode_streaming",
    "dwjd_run",
    "init_model",
    "joint_loss",
    "receptive_field",
    "split_chunks",
    "train",
]
