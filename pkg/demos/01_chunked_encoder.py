"""
Chunked self-attention encoding with state reuse
================================================

An utterance is cut into non-overlapping central chunks. Each chunk also
sees N_l history frames and N_r future frames. The isolated encoder
recomputes the history every time; the state-reuse encoder reads the
hidden states it kept from earlier chunks instead.
"""

import numpy as np

from onlinectc.bench import counted_positions, steady_chunks
from onlinectc.encoder import ISOLATED, STATE_REUSE, ChunkConfig, encode, init_encoder, receptive_field, split_chunks

# chunk geometry is counted in 10 ms input frames
config = ChunkConfig(left=64, center=64, right=64)
print("algorithmic latency:", config.latency_ms, "ms")

for span in split_chunks(300, config):
    print(f"chunk {span.index}: history {span.history} central {span.central} future {span.future}")

# a small encoder: 3 layers, conv front-end with 4x time reduction
rng = np.random.default_rng(0)
params = init_encoder(rng, feat_dim=16, d_model=32, heads=2, d_ff=64, num_layers=3)
feats = rng.normal(size=(64 * 7, 16))

# how many positions does each layer evaluate per chunk?
for mode in (ISOLATED, STATE_REUSE):
    per_chunk = counted_positions(params, feats, config, mode)
    full = steady_chunks(len(feats), config)[0].index
    print(f"{mode:12s} positions per layer in a full chunk: {per_chunk[full][0]}")

# the two modes agree on the first chunk and drift apart afterwards,
# because reused states were themselves computed with a longer history
iso = encode(params, feats, config, ISOLATED).data
reuse = encode(params, feats, config, STATE_REUSE).data
print("first chunk identical:", np.array_equal(iso[:16], reuse[:16]))
print("max difference later on:", np.abs(iso - reuse).max())

# with state reuse the left receptive field grows with depth
for layers in (1, 3, 12):
    print(f"{layers:2d} layers: isolated {receptive_field(config, layers, ISOLATED)} frames, "
          f"state reuse {receptive_field(config, layers, STATE_REUSE)} frames")
