"""Synthetic "speech": grammar-generated token strings rendered as feature templates.

Every token owns a fixed template (length and spectral pattern) that does not
depend on the dataset seed, so a model trained on one seed transfers to
utterances drawn with another. Only token sequences and additive noise vary
with the seed.
"""

from __future__ import annotations

import numpy as np

ALPHABET = "abcdef"
FEAT_DIM = 16
TEMPLATE_SEED = 20200214
_LENGTHS = (12, 16, 20, 12, 16, 20)

GRAMMARS = {
    # grammar id -> (min length, max length, transition sharpness)
    0: (3, 6, 2.0),
    1: (2, 4, 0.5),
}


def vocab_size(alphabet=ALPHABET):
    """blank + tokens + sos/eos."""
    return len(alphabet) + 2


def token_ids(text, alphabet=ALPHABET):
    return [alphabet.index(ch) + 1 for ch in text]


def token_text(ids, alphabet=ALPHABET):
    return "".join(alphabet[i - 1] for i in ids if 1 <= i <= len(alphabet))


def templates(feat_dim=FEAT_DIM, alphabet=ALPHABET):
    """Per-token ``(length x feat_dim)`` feature templates."""
    rng = np.random.default_rng(TEMPLATE_SEED)
    out = []
    for i in range(len(alphabet)):
        length = _LENGTHS[i % len(_LENGTHS)]
        base = rng.normal(0.0, 1.0, feat_dim)
        slope = rng.normal(0.0, 1.0, feat_dim)
        ramp = np.linspace(-1.0, 1.0, length)[:, None]
        envelope = np.hanning(length + 2)[1:-1, None]
        out.append(envelope * (2.0 * base + slope * ramp))
    return out


def transition_matrix(grammar_id, n_tokens=len(ALPHABET)):
    if grammar_id not in GRAMMARS:
        raise ValueError(f"unknown grammar id {grammar_id}")
    sharp = GRAMMARS[grammar_id][2]
    rng = np.random.default_rng(1000 + grammar_id)
    logits = sharp * rng.normal(size=(n_tokens + 1, n_tokens))
    probs = np.exp(logits)
    return probs / probs.sum(axis=1, keepdims=True)


def sample_sentence(rng, grammar_id):
    lo, hi, _ = GRAMMARS[grammar_id]
    trans = transition_matrix(grammar_id)
    length = int(rng.integers(lo, hi + 1))
    prev = len(trans) - 1  # start row
    ids = []
    for _ in range(length):
        tok = int(rng.choice(trans.shape[1], p=trans[prev]))
        ids.append(tok + 1)
        prev = tok
    return ids


def render(ids, rng, noise=0.3, feat_dim=FEAT_DIM):
    """Concatenate token templates and add Gaussian noise."""
    temps = templates(feat_dim)
    frames = np.concatenate([temps[i - 1] for i in ids]) if ids else np.zeros((0, feat_dim))
    return frames + noise * rng.normal(size=frames.shape)


def make_dataset(seed, num_utts, grammar_id=0, noise=0.3):
    """``[(utt_id, features, token_ids), ...]``, deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    data = []
    for n in range(num_utts):
        ids = sample_sentence(rng, grammar_id)
        data.append((f"utt{n:04d}", render(ids, rng, noise), ids))
    return data
