"""
Monotonic truncated attention
=============================

In training, every encoder output j gets a truncation probability p_j and
the attention weight a_j = p_j * prod_{k<j} (1 - p_k). At decode time the
decoder scans forward from its previous end-point, stops at the first
output with p > 0.5 and attends only up to there. That is what lets it run
before the utterance has ended.
"""

import numpy as np

from onlinectc.autodiff import Tensor
from onlinectc.mta import NEED_MORE, EncoderMemory, init_mta, mta_decode_step, mta_train_forward

rng = np.random.default_rng(1)
mta = init_mta(rng, d_model=8)
print("initial offset r:", mta.r.data[0], "-> starting probability", 1 / (1 + np.exp(4.0)))

# an untrained layer with r = -4 would almost never truncate; use r = 0
mta.r.data[:] = 0.0
enc = rng.normal(size=(12, 8))
queries = rng.normal(size=(3, 8))

context, p = mta_train_forward(mta, Tensor(queries), Tensor(enc), Tensor(enc))
p = p.data
weights = p * np.concatenate([np.ones((3, 1)), np.cumprod(1 - p, axis=1)[:, :-1]], axis=1)
np.set_printoptions(precision=3, suppress=True)
print("truncation probabilities:\n", p)
print("attention weights:\n", weights)
print("row sums:", weights.sum(axis=1), " = 1 - prod(1-p):", 1 - np.prod(1 - p, axis=1))

# decode mode: feed the encoder outputs in blocks of 4 as a stream would
memory = EncoderMemory(8)
step = NEED_MORE
for start in range(0, 12, 4):
    memory.append(enc[start : start + 4])
    step = mta_decode_step(mta, queries[1], memory, layer=0, prev_endpoint=1)
    if step is NEED_MORE:
        print(f"{len(memory)} outputs available: no crossing yet, wait for more")
    else:
        print(f"{len(memory)} outputs available: end-point {step.endpoint}")
        break
if step is NEED_MORE:
    # at the end of the stream the decoder falls back to attending over everything
    memory.close()
    step = mta_decode_step(mta, queries[1], memory, layer=0, prev_endpoint=1)
    print("stream closed: end-point", step.endpoint)

# the truncated weights are exactly the training weights up to the end-point
t = step.endpoint
print("matches training weights:", np.allclose(step.weights, weights[1, :t], atol=1e-12, rtol=0))
