"""
CTC loss and truncated prefix scores
====================================

The CTC loss sums over every frame-level path that collapses to the label
sequence. For tiny sizes we can list all paths and check the forward
recursion against them. Prefix scores answer a different question: how
likely is it that the output starts with a given prefix, looking only at
the first tau frames?
"""

import itertools
import math

import numpy as np

from onlinectc.ctc import CtcPrefixScorer, ctc_loss

rng = np.random.default_rng(0)
T, V = 5, 3  # blank plus two labels
logits = rng.normal(size=(T, V))
log_probs = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))


def collapse(path):
    out, prev = [], None
    for s in path:
        if s != prev and s != 0:
            out.append(s)
        prev = s
    return tuple(out)


# brute force: all V**T paths
mass = {}
for path in itertools.product(range(V), repeat=T):
    prob = math.exp(sum(log_probs[t, s] for t, s in enumerate(path)))
    mass[collapse(path)] = mass.get(collapse(path), 0.0) + prob

labels = (1, 2)
print("P(labels) forward-backward:", math.exp(-ctc_loss(log_probs, list(labels)).data))
print("P(labels) enumeration:     ", mass[labels])

scorer = CtcPrefixScorer(V)
scorer.append(log_probs)
scorer.close()
for tau in range(1, T + 1):
    s = scorer.score((1,), [2], tau)[0]
    print(f"tau={tau}: P(output starts with 1 2 | first {tau} frames) = {math.exp(s):.4f}")

# probability bookkeeping: extending by each label or stopping covers the prefix mass
ext = np.exp(scorer.score((1,), [1, 2], T)).sum()
stop = math.exp(scorer.terminate_score((1,), T))
print("extensions + termination:", ext + stop, " prefix mass:", math.exp(scorer.prefix_score((1,), T)))
