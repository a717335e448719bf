"""
Training a toy recognizer
=========================

The synthetic corpus renders each of six tokens as a fixed feature
template plus noise, so a small model can learn the mapping in a few
minutes on a CPU. Training minimises alpha * attention loss +
(1 - alpha) * CTC loss, and the final weights are the average of the
last few epoch snapshots.

Writes demos/out/toy.ckpt, which the streaming demo picks up.
"""

import time
from pathlib import Path

import numpy as np

from onlinectc import synth
from onlinectc.decoding import DecodeConfig, decode_offline
from onlinectc.formats import save_model
from onlinectc.lm import lm_train
from onlinectc.metrics import edit_distance
from onlinectc.model import ModelConfig, init_model
from onlinectc.training import TrainConfig, evaluate_loss, train

train_set = [(f, y) for _, f, y in synth.make_dataset(seed=1, num_utts=100)]
test_set = synth.make_dataset(seed=2, num_utts=20)
print("example transcript:", synth.token_text(train_set[0][1]), "frames:", len(train_set[0][0]))

config = ModelConfig()  # 2+2 layers, d_model 32, chunks of 16/16/16 frames
model = init_model(config, seed=0)
recipe = TrainConfig(dropout=0.0, warmup=200, epochs=40, average_last=5)

start = time.perf_counter()
before = evaluate_loss(model, train_set, recipe)
history = train(model, train_set, recipe, on_epoch=lambda r: print(f"epoch {r['epoch']:2d} loss {r['loss']:.3f} acc {r['token_acc']:.3f}") if r["epoch"] % 5 == 0 else None)
after = evaluate_loss(model, train_set, recipe)
print(f"joint loss {before:.2f} -> {after:.2f} ({1 - after / before:.0%} lower) in {time.perf_counter() - start:.0f} s")

# greedy joint decoding on held-out utterances
cfg = DecodeConfig(attention_weight=0.5, lm_weight=0.0, beam=1)
errors = sum(edit_distance(y, list(decode_offline(model, f, cfg).best.labels)) for _, f, y in test_set)
print(f"held-out token accuracy: {1 - errors / sum(len(y) for _, _, y in test_set):.1%}")

lm = lm_train([y for _, y in train_set], order=2, vocab_size=config.vocab_size, bos=config.sos, eos=config.eos)
out = Path(__file__).parent / "out"
out.mkdir(exist_ok=True)
save_model(out / "toy.ckpt", model, synth.ALPHABET, lm)
print("saved", out / "toy.ckpt")
