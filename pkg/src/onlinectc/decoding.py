"""Joint CTC/attention beam search over a stream of encoder chunks.

A hypothesis is ranked by

    attention_weight * dec + (1 - attention_weight) * tctc + lm_weight * lm

where ``tctc`` is the CTC prefix score truncated at the decoder's current
receptive field (the maximum MTA end-point over layers, plus ``ctc_margin``
outputs). A hypothesis that ends in eos is instead scored with the full
CTC probability of its labels over the whole utterance. Because the
truncation point is a function of the hypothesis alone, decoding while chunks stream in gives exactly the same hypotheses and
scores as decoding after the whole utterance has been encoded; streaming only
changes *when* each beam step can run.
"""

from __future__ import annotations

import dataclasses
import logging
from typing import Iterable, NamedTuple

import numpy as np

from .ctc import CtcPrefixScorer
from .encoder import FRAME_SHIFT_MS, SUBSAMPLE, STATE_REUSE, EncoderStream
from .lm import lm_score
from .mta import NEED_MORE, DecoderCache, EncoderMemory, TruncationState, decoder_step

logger = logging.getLogger(__name__)


@dataclasses.dataclass(frozen=True)
class DecodeConfig:
    attention_weight: float = 0.5
    lm_weight: float = 0.3
    beam: int = 10
    pre_beam: int = 15
    ctc_margin: int = 1
    max_len: int | None = None
    end_detect: bool = True

    @property
    def ctc_weight(self):
        return 1.0 - self.attention_weight


@dataclasses.dataclass(frozen=True)
class Hypothesis:
    tokens: tuple[int, ...]
    dec_score: float
    ctc_score: float
    lm_score: float
    trunc: TruncationState
    cache: DecoderCache = dataclasses.field(repr=False, compare=False)
    finished: bool = False
    endpoints: tuple[int, ...] = ()
    emitted_at: tuple[int, ...] = dataclasses.field(default=(), compare=False)

    def score(self, cfg):
        return (
            cfg.attention_weight * self.dec_score
            + cfg.ctc_weight * self.ctc_score
            + cfg.lm_weight * self.lm_score
        )

    @property
    def labels(self):
        """Output tokens without sos and a trailing eos."""
        body = self.tokens[1:]
        return body[:-1] if self.finished else body


class DecodeResult(NamedTuple):
    best: Hypothesis
    finished: list
    latency: dict


class StreamSession:
    """One utterance: incremental encoder, decoder-side memory and the beam.

    Feed frames with :meth:`push`, call :meth:`finish` at end of stream and
    :meth:`decode_available` whenever new outputs may unblock the beam.

    Hypotheses ending in eos leave the beam at once and do not compete with
    active ones for beam slots. Their CTC term is the probability that the
    whole utterance collapses to their labels, so it is filled in only once
    the stream has ended. End detection (stop once the best finished score
    reaches the best active score of a step) is then evaluated step by step
    over the recorded history, which yields the same cut-off step whether
    the beam ran ahead while the stream was open or not.
    """

    def __init__(self, model, cfg=DecodeConfig(), lm=None, encoder_mode=None):
        self.model = model
        self.cfg = cfg
        self.lm = lm
        mc = model.config
        self.encoder = EncoderStream(model.encoder, mc.chunk, encoder_mode or mc.encoder_mode or STATE_REUSE)
        self.memory = EncoderMemory(mc.d_model)
        self.ctc = CtcPrefixScorer(mc.vocab_size, blank=mc.blank, eos=mc.eos)
        self.eos = mc.eos
        self.blank = mc.blank
        root = Hypothesis(
            tokens=(mc.sos,),
            dec_score=0.0,
            ctc_score=0.0,
            lm_score=0.0,
            trunc=TruncationState.initial(mc.dec_layers),
            cache=DecoderCache.empty(mc.dec_layers, mc.d_model),
        )
        self.beam = [root]
        self.pending = []  # (step, hypothesis) ended in eos, CTC term not final yet
        self.finished = []
        self.best_active = []  # best active score after each step
        self.checked = 0
        self.done = False
        self.steps = 0
        self.suspensions = 0

    @property
    def tau(self):
        return len(self.memory)

    def _absorb(self, outputs):
        for out in outputs:
            self.memory.append(out)
            self.ctc.append(self.model.ctc_log_probs(out).data)

    def push(self, frames):
        self._absorb(self.encoder.push(frames))

    def finish(self):
        self._absorb(self.encoder.finish())
        self.memory.close()
        self.ctc.close()
        self._finalize_pending()
        self._check_done()

    def _max_len(self):
        if self.cfg.max_len is not None:
            return self.cfg.max_len
        return 2 * self.tau if self.memory.closed else None

    def beam_step(self):
        """Expand every active hypothesis by one token.

        Returns ``NEED_MORE`` (and leaves the session untouched) when any
        hypothesis needs encoder outputs that have not arrived yet.
        """
        if self.done:
            return False
        if self.memory.closed and self.tau == 0:
            self.finished = [(0, dataclasses.replace(self.beam[0], finished=True))]
            self.beam = []
            self.done = True
            return False
        if not self.beam:
            # everything ended early; only the end of stream can settle the result
            return self._suspend()
        cfg = self.cfg
        steps = []
        for hyp in self.beam:
            length = len(hyp.tokens) - 1
            max_len = self._max_len()
            if max_len is None and length >= 2 * self.tau:
                return self._suspend()
            res = decoder_step(self.model.decoder, hyp.tokens[-1], self.memory, hyp.trunc, hyp.cache)
            if res is NEED_MORE:
                return self._suspend()
            tau = res.state.receptive_field + cfg.ctc_margin
            if tau > self.tau:
                if not self.memory.closed:
                    return self._suspend()
                tau = self.tau
            steps.append((hyp, res, tau, max_len is not None and length >= max_len))

        emitted_at = self.encoder.frames_received
        pool = []
        for hyp, res, tau, force_eos in steps:
            logp = res.log_probs
            if force_eos:
                cands = np.array([self.eos])
            else:
                order = np.argsort(-logp, kind="stable")
                cands = order[order != self.blank][: cfg.pre_beam]
            regular = cands[cands != self.eos]
            ctc_scores = np.zeros(len(regular))
            if cfg.ctc_weight != 0.0 and len(regular):
                ctc_scores = self.ctc.score(hyp.tokens[1:], regular, tau)
            ctc_of = dict(zip(regular.tolist(), ctc_scores))
            rf = res.state.receptive_field
            for c in cands.tolist():
                lm = hyp.lm_score
                if self.lm is not None and cfg.lm_weight != 0.0:
                    lm += lm_score(self.lm, hyp.tokens, c)
                new = Hypothesis(
                    tokens=hyp.tokens + (c,),
                    dec_score=hyp.dec_score + float(logp[c]),
                    ctc_score=float(ctc_of.get(c, np.nan)),
                    lm_score=lm,
                    trunc=res.state,
                    cache=res.cache,
                    finished=c == self.eos,
                    endpoints=hyp.endpoints + (rf,),
                    emitted_at=hyp.emitted_at + (emitted_at,),
                )
                if new.finished:
                    self.pending.append((self.steps + 1, new))
                else:
                    pool.append(new)
        scores = np.array([h.score(cfg) for h in pool])
        keep = np.argsort(-scores, kind="stable")[: cfg.beam]
        self.beam = [pool[i] for i in keep]
        self.best_active.append(float(scores[keep[0]]) if len(keep) else -np.inf)
        self.steps += 1
        if self.memory.closed:
            self._finalize_pending()
        self._check_done()
        return True

    def _suspend(self):
        self.suspensions += 1
        return NEED_MORE

    def _finalize_pending(self):
        """Give eos hypotheses their full-utterance CTC term."""
        for step, hyp in self.pending:
            ctc = 0.0
            if self.cfg.ctc_weight != 0.0:
                ctc = self.ctc.terminate_score(hyp.labels, self.tau)
            self.finished.append((step, dataclasses.replace(hyp, ctc_score=ctc)))
        self.pending = []

    def _check_done(self):
        if not self.memory.closed:
            return
        best_fin = -np.inf
        for step in range(1, self.steps + 1):
            for s, h in self.finished:
                if s == step:
                    best_fin = max(best_fin, h.score(self.cfg))
            if step <= self.checked:
                continue
            empty = step == self.steps and not self.beam
            if empty or (self.cfg.end_detect and best_fin >= self.best_active[step - 1]):
                self.finished = [(s, h) for s, h in self.finished if s <= step]
                self.beam = []
                self.done = True
                return
        self.checked = self.steps

    def decode_available(self):
        """Run beam steps until the beam suspends or decoding is complete."""
        while not self.done:
            if self.beam_step() is NEED_MORE:
                if self.memory.closed:
                    raise RuntimeError("beam suspended after end of stream")
                return NEED_MORE
        return True

    def finished_hypotheses(self):
        return [h for _, h in self.finished]

    def best(self):
        hyps = self.finished_hypotheses()
        if not hyps:
            return None
        scores = [h.score(self.cfg) for h in hyps]
        return hyps[int(np.argmax(scores))]

    def latency_report(self, hyp):
        """Per-token emission latency and the configured algorithmic latency (ms)."""
        chunk = self.model.config.chunk
        lookahead = self.model.encoder.front.lookahead
        total_in = self.encoder.frames_received
        per_token = []
        for rf, avail in zip(hyp.endpoints, hyp.emitted_at):
            end_frame = min(rf * SUBSAMPLE, total_in)
            per_token.append((avail - end_frame) * FRAME_SHIFT_MS)
        return {
            "algorithmic_ms": chunk.latency_ms,
            "frontend_lookahead_ms": lookahead * FRAME_SHIFT_MS,
            "token_emission_ms": per_token,
            "endpoints": list(hyp.endpoints),
        }


def dwjd_run(session, chunk_source: Iterable):
    """Interleave chunk arrival with beam search until the stream ends.

    ``chunk_source`` yields arrays of input frames in order; exhausting it
    marks the end of the stream.
    """
    for frames in chunk_source:
        session.push(frames)
        session.decode_available()
    session.finish()
    session.decode_available()
    best = session.best()
    return DecodeResult(best, session.finished_hypotheses(), session.latency_report(best))


def frame_pieces(features, size):
    for start in range(0, len(features), size):
        yield features[start : start + size]


def decode_offline(model, features, cfg=DecodeConfig(), lm=None):
    """Encode the whole utterance first, then run the beam to completion."""
    session = StreamSession(model, cfg, lm)
    if len(features):
        session.push(features)
    session.finish()
    session.decode_available()
    best = session.best()
    return DecodeResult(best, session.finished_hypotheses(), session.latency_report(best))


def decode_streaming(model, features, cfg=DecodeConfig(), lm=None, piece=None):
    piece = piece or model.config.chunk_center
    return dwjd_run(StreamSession(model, cfg, lm), frame_pieces(features, piece))
