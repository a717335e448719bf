"""Add-k smoothed unigram/bigram language model over integer token ids."""

from __future__ import annotations

import dataclasses
import math

import numpy as np


@dataclasses.dataclass
class NgramModel:
    order: int
    k: float
    unigram: np.ndarray  # (V,)
    bigram: np.ndarray  # (V, V) history x next; zeros for order 1
    unk: int | None = None

    @property
    def vocab_size(self):
        return len(self.unigram)

    def _id(self, token):
        token = int(token)
        if 0 <= token < self.vocab_size:
            return token
        if self.unk is None:
            raise KeyError(f"token {token} outside vocabulary and no unknown symbol set")
        return self.unk

    def distribution(self, history=()):
        """Smoothed next-token distribution after ``history``."""
        v = self.vocab_size
        if self.order == 1 or len(history) == 0:
            counts = self.unigram
        else:
            counts = self.bigram[self._id(history[-1])]
        return (counts + self.k) / (counts.sum() + self.k * v)


def lm_train(corpus, order, k=1.0, vocab_size=None, bos=None, eos=None, unk=None):
    """Count n-grams over ``corpus`` (an iterable of token-id sequences).

    When ``bos``/``eos`` are given each sequence is wrapped with them, so the
    first token is conditioned on ``bos`` and ``eos`` is predicted last.
    """
    if order not in (1, 2):
        raise ValueError("only unigram and bigram models are supported")
    corpus = [list(seq) for seq in corpus]
    if not corpus:
        raise ValueError("empty corpus")
    if vocab_size is None:
        vocab_size = 1 + max([t for seq in corpus for t in seq] + [bos or 0, eos or 0])
    uni = np.zeros(vocab_size)
    bi = np.zeros((vocab_size, vocab_size))
    for seq in corpus:
        hist = [bos] if bos is not None else []
        seq = seq + ([eos] if eos is not None else [])
        for tok in seq:
            uni[tok] += 1
            if hist:
                bi[hist[-1], tok] += 1
            hist.append(tok)
    if order == 1:
        bi[:] = 0.0
    return NgramModel(order=order, k=float(k), unigram=uni, bigram=bi, unk=unk)


def lm_score(model, history, token):
    """``log P(token | history)`` under add-k smoothing."""
    return math.log(model.distribution(history)[model._id(token)])


def uniform_model(vocab_size):
    return NgramModel(order=1, k=1.0, unigram=np.zeros(vocab_size), bigram=np.zeros((vocab_size, vocab_size)))
