"""
Decoding while the audio arrives
================================

A StreamSession takes feature frames as they come in. The encoder emits a
chunk once its future context is complete; the beam search then runs as
far as the available encoder outputs allow and pauses otherwise. The
result is identical to decoding the finished utterance.
"""

from pathlib import Path

import numpy as np

from onlinectc import synth
from onlinectc.decoding import DecodeConfig, StreamSession, decode_offline
from onlinectc.formats import load_model
from onlinectc.model import ModelConfig, init_model
from onlinectc.training import TrainConfig, train

ckpt = Path(__file__).parent / "out" / "toy.ckpt"
if ckpt.exists():
    model, vocab, lm = load_model(ckpt)
else:
    print("no checkpoint from the training demo; training a quick model instead")
    model = init_model(ModelConfig(), seed=0)
    train(model, [(f, y) for _, f, y in synth.make_dataset(1, 60)], TrainConfig(dropout=0.0, epochs=15, average_last=3))
    vocab, lm = synth.ALPHABET, None

utt, feats, ref = synth.make_dataset(seed=2, num_utts=1)[0]
cfg = DecodeConfig(attention_weight=0.5, lm_weight=0.3 if lm is not None else 0.0, beam=5)

# push 10 frames (100 ms) at a time and see when tokens become available
session = StreamSession(model, cfg, lm)
for start in range(0, len(feats), 10):
    session.push(feats[start : start + 10])
    session.decode_available()
    best = max(session.beam, key=lambda h: h.score(cfg), default=None)
    partial = synth.token_text(best.labels, vocab) if best else ""
    print(f"{(start + 10) * 10:5d} ms: {len(session.memory):3d} encoder outputs, best partial '{partial}'")
session.finish()
session.decode_available()
hyp = session.best()
print("reference:", synth.token_text(ref, vocab))
print("streamed: ", synth.token_text(hyp.labels, vocab))
print("score parts: dec %.3f ctc %.3f lm %.3f" % (hyp.dec_score, hyp.ctc_score, hyp.lm_score))

offline = decode_offline(model, feats, cfg, lm).best
print("same as offline:", offline.tokens == hyp.tokens and offline.score(cfg) == hyp.score(cfg))

report = session.latency_report(hyp)
print("algorithmic latency:", report["algorithmic_ms"], "ms; front-end lookahead:", report["frontend_lookahead_ms"], "ms")
print("per-token end-points (encoder outputs):", report["endpoints"])
print("per-token emission delay (ms):", report["token_emission_ms"])
