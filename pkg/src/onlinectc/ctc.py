"""CTC loss and incremental (truncated) CTC prefix scores.

Blank is index 0. All recursions run in log space with ``LOG_ZERO`` standing
in for log(0).
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor, record

LOG_ZERO = -1e10
BLANK = 0


class CtcInfeasibleError(ValueError):
    """Too few frames to emit the label sequence."""


def min_frames(labels):
    """Frames needed to emit ``labels``: one per label plus one per repeat."""
    labels = list(labels)
    repeats = sum(1 for a, b in zip(labels, labels[1:]) if a == b)
    return len(labels) + repeats


def _lae(a, b):
    return np.logaddexp(a, b)


def _forward_backward(lp, labels, blank):
    t_len = lp.shape[0]
    ext = np.full(2 * len(labels) + 1, blank, dtype=np.int64)
    ext[1::2] = labels
    s_len = len(ext)
    # transitions s-2 -> s allowed for non-blank labels differing from ext[s-2]
    skip = np.zeros(s_len, dtype=bool)
    skip[2:] = (ext[2:] != blank) & (ext[2:] != ext[:-2])

    alpha = np.full((t_len, s_len), LOG_ZERO)
    alpha[0, 0] = lp[0, ext[0]]
    if s_len > 1:
        alpha[0, 1] = lp[0, ext[1]]
    for t in range(1, t_len):
        prev = alpha[t - 1]
        acc = prev.copy()
        acc[1:] = _lae(acc[1:], prev[:-1])
        acc[2:] = np.where(skip[2:], _lae(acc[2:], prev[:-2]), acc[2:])
        alpha[t] = np.maximum(acc + lp[t, ext], LOG_ZERO)

    beta = np.full((t_len, s_len), LOG_ZERO)
    beta[-1, -1] = lp[-1, ext[-1]]
    if s_len > 1:
        beta[-1, -2] = lp[-1, ext[-2]]
    for t in range(t_len - 2, -1, -1):
        nxt = beta[t + 1]
        acc = nxt.copy()
        acc[:-1] = _lae(acc[:-1], nxt[1:])
        acc[:-2] = np.where(skip[2:], _lae(acc[:-2], nxt[2:]), acc[:-2])
        beta[t] = np.maximum(acc + lp[t, ext], LOG_ZERO)

    log_z = alpha[-1, -1] if s_len == 1 else _lae(alpha[-1, -1], alpha[-1, -2])
    return ext, alpha, beta, log_z


def ctc_loss(log_probs, labels, blank=BLANK):
    """Negative log-likelihood of ``labels`` under per-frame ``log_probs`` (T x V).

    Differentiable with respect to ``log_probs``; the gradient of ``-log Z``
    with respect to ``log_probs[t, k]`` is minus the posterior occupancy of
    symbol ``k`` at frame ``t``.
    """
    lp_t = log_probs if isinstance(log_probs, Tensor) else Tensor(log_probs)
    lp = lp_t.data
    labels = np.asarray(labels, dtype=np.int64)
    if lp.shape[0] < max(1, min_frames(labels)):
        raise CtcInfeasibleError(
            f"{lp.shape[0]} frames cannot emit {len(labels)} labels "
            f"(need {min_frames(labels)})"
        )
    if np.any(labels == blank):
        raise ValueError("labels must not contain the blank symbol")
    ext, alpha, beta, log_z = _forward_backward(lp, labels, blank)

    def grad_fn(g):
        post = np.exp(alpha + beta - lp[:, ext] - log_z)
        occ = np.zeros_like(lp)
        for s, k in enumerate(ext):
            occ[:, k] += post[:, s]
        return (-g * occ,)

    return record(-log_z, (lp_t,), grad_fn)


class CtcPrefixScorer:
    """Prefix probabilities over a growing table of CTC log-probabilities.

    Forward variables are cached per prefix (a tuple of labels, sos
    excluded) and extended frame by frame, so scoring after new frames
    arrive never recomputes what is already known. ``score`` evaluates the
    truncated prefix score over the first ``tau`` frames only.
    """

    def __init__(self, num_classes, blank=BLANK, eos=None):
        self.num_classes = num_classes
        self.blank = blank
        self.eos = eos
        self._lp = np.zeros((0, num_classes))
        self.closed = False
        self.max_read = 0
        # prefix -> [r_n list, r_b list, psi list] indexed by frame
        self._states = {(): None}
        self._last_tau = {}

    def __len__(self):
        return len(self._lp)

    def append(self, log_probs):
        log_probs = log_probs.data if isinstance(log_probs, Tensor) else np.asarray(log_probs)
        if self.closed:
            raise RuntimeError("CTC table already closed")
        self._lp = np.concatenate([self._lp, log_probs.reshape(-1, self.num_classes)])

    def close(self):
        self.closed = True

    def _frames(self, upto):
        if upto > len(self._lp):
            raise ValueError(f"frame {upto} not available yet ({len(self._lp)} arrived)")
        self.max_read = max(self.max_read, upto)
        return self._lp[:upto]

    def _root(self, upto):
        lp = self._frames(upto)
        r_b = np.cumsum(lp[:, self.blank])
        return np.full(upto, LOG_ZERO), r_b

    def _state(self, prefix, upto):
        """Forward variables ``(r_n, r_b)`` of ``prefix`` for frames ``0..upto-1``."""
        if not prefix:
            return self._root(upto)
        st = self._states.get(prefix)
        if st is None or len(st[0]) < upto:
            self._extend(prefix, upto)
            st = self._states[prefix]
        return np.asarray(st[0][:upto]), np.asarray(st[1][:upto])

    def _extend(self, prefix, upto):
        parent, c = prefix[:-1], prefix[-1]
        st = self._states.get(prefix)
        start = 0 if st is None else len(st[0])
        r_n, r_b, psi = self._advance(parent, np.array([c]), start, upto, st)
        if st is None:
            self._states[prefix] = [list(r_n[:, 0]), list(r_b[:, 0]), list(psi[:, 0])]
        else:
            st[0].extend(r_n[:, 0])
            st[1].extend(r_b[:, 0])
            st[2].extend(psi[:, 0])

    def _advance(self, parent, cands, start, upto, init=None):
        """Run the prefix recursion for children ``parent + (c,)`` over frames ``start..upto-1``.

        Returns per-frame ``(r_n, r_b, psi)`` arrays of shape ``(upto-start, C)``.
        """
        lp = self._frames(upto)
        n = upto - start
        out_n = np.full((n, len(cands)), LOG_ZERO)
        out_b = np.full((n, len(cands)), LOG_ZERO)
        out_psi = np.full((n, len(cands)), LOG_ZERO)
        if n <= 0:
            return out_n, out_b, out_psi
        pr_n, pr_b = self._state(parent, max(upto - 1, 0))
        last = parent[-1] if parent else None
        if init is None or start == 0:
            r_n = np.full(len(cands), LOG_ZERO)
            r_b = np.full(len(cands), LOG_ZERO)
            psi = np.full(len(cands), LOG_ZERO)
        else:
            r_n = np.full(len(cands), init[0][-1])
            r_b = np.full(len(cands), init[1][-1])
            psi = np.full(len(cands), init[2][-1])
        y_c = lp[:, cands]
        for t in range(start, upto):
            if t == 0:
                r_n = y_c[0].copy() if not parent else np.full(len(cands), LOG_ZERO)
                r_b = np.full(len(cands), LOG_ZERO)
                psi = r_n.copy()
            else:
                phi = np.where(cands == last, pr_b[t - 1], _lae(pr_b[t - 1], pr_n[t - 1]))
                new_n = _lae(r_n, phi) + y_c[t]
                r_b = _lae(r_b, r_n) + lp[t, self.blank]
                r_n = new_n
                psi = _lae(psi, phi + y_c[t])
            r_n = np.maximum(r_n, LOG_ZERO)
            r_b = np.maximum(r_b, LOG_ZERO)
            psi = np.maximum(psi, LOG_ZERO)
            out_n[t - start], out_b[t - start], out_psi[t - start] = r_n, r_b, psi
        return out_n, out_b, out_psi

    def _check_tau(self, prefix, tau):
        last = self._last_tau.get(prefix, 0)
        if tau < last:
            raise ValueError(f"tau decreased from {last} to {tau} for prefix {prefix}")
        self._last_tau[prefix] = tau

    def score(self, prefix, candidates, tau):
        """Log prefix probabilities of ``prefix + (c,)`` over the first ``tau`` frames.

        A candidate equal to ``eos`` gets the probability that ``prefix`` is
        the complete output of those frames instead.
        """
        prefix = tuple(prefix)
        cands = np.asarray(candidates, dtype=np.int64)
        self._check_tau(prefix, tau)
        out = np.full(len(cands), LOG_ZERO)
        if tau == 0:
            for i, c in enumerate(cands):
                if c == self.eos and not prefix:
                    out[i] = 0.0
            return out
        is_eos = cands == self.eos if self.eos is not None else np.zeros(len(cands), bool)
        if is_eos.any():
            out[is_eos] = self.terminate_score(prefix, tau)
        reg = np.flatnonzero(~is_eos)
        todo = [i for i in reg if (prefix + (int(cands[i]),)) not in self._states]
        if todo:
            sub = cands[todo]
            r_n, r_b, psi = self._advance(prefix, sub, 0, tau)
            for col, c in enumerate(sub):
                self._states[prefix + (int(c),)] = [list(r_n[:, col]), list(r_b[:, col]), list(psi[:, col])]
        for i in reg:
            child = prefix + (int(cands[i]),)
            st = self._states[child]
            if len(st[2]) < tau:
                self._extend(child, tau)
            out[i] = st[2][tau - 1]
        return out

    def prefix_score(self, prefix, tau):
        """log P(the output of the first ``tau`` frames starts with ``prefix``)."""
        prefix = tuple(prefix)
        if not prefix:
            return 0.0
        if tau == 0:
            return LOG_ZERO
        st = self._states.get(prefix)
        if st is None or len(st[2]) < tau:
            self._extend(prefix, tau)
            st = self._states[prefix]
        return float(st[2][tau - 1])

    def terminate_score(self, prefix, tau):
        """log P(the first ``tau`` frames collapse to exactly ``prefix``)."""
        prefix = tuple(prefix)
        if tau == 0:
            return 0.0 if not prefix else LOG_ZERO
        r_n, r_b = self._state(prefix, tau)
        return float(max(_lae(r_n[-1], r_b[-1]), LOG_ZERO))


def ctc_prefix_score(scorer, prefix, candidate, tau):
    """log P_tctc of ``prefix + (candidate,)`` over ``tau`` frames.

    ``candidate=None`` scores ``prefix`` itself.
    """
    if candidate is None:
        return scorer.prefix_score(prefix, tau)
    return float(scorer.score(prefix, [candidate], tau)[0])
