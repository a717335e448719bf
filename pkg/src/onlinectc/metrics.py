"""Character error rate."""

from __future__ import annotations


def edit_distance(ref, hyp):
    """Levenshtein distance with unit costs."""
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, 1):
        cur = [i] + [0] * len(hyp)
        for j, h in enumerate(hyp, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (r != h))
        prev = cur
    return prev[-1]


def cer(refs, hyps):
    """Micro-averaged CER over aligned ``{utt_id: text}`` mappings."""
    if refs.keys() != hyps.keys():
        missing = sorted(set(refs) ^ set(hyps))
        raise KeyError(f"utterance ids differ between reference and hypothesis: {missing[:5]}")
    errors = sum(edit_distance(refs[u], hyps[u]) for u in refs)
    total = sum(len(refs[u]) for u in refs)
    return errors / total if total else 0.0
