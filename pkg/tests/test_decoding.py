import numpy as np
import pytest

from oracles import exhaustive_best, sequence_scores, tiny_model
from onlinectc.decoding import DecodeConfig, StreamSession, decode_offline, decode_streaming
from onlinectc.lm import lm_train
from onlinectc.mta import NEED_MORE


def feats(t, seed=0, dim=16):
    return np.random.default_rng(seed).normal(size=(t, dim))


def tiny_lm():
    return lm_train([[3, 1, 2, 3], [3, 2, 2, 3], [3, 1, 3]], order=2, vocab_size=4)


ORACLE_CFG = dict(beam=8, pre_beam=3, max_len=3, end_detect=False)


class TestBeamOracle:
    @pytest.mark.parametrize("seed", range(3))
    @pytest.mark.parametrize("lam, gamma", [(0.5, 0.0), (0.3, 0.4), (1.0, 0.0), (0.0, 0.2)])
    def test_exhaustive_beam_finds_joint_argmax(self, seed, lam, gamma):
        model = tiny_model(seed)
        x = feats(28, seed)
        lm = tiny_lm() if gamma else None
        cfg = DecodeConfig(attention_weight=lam, lm_weight=gamma, **ORACLE_CFG)
        labels, score, everything = exhaustive_best(model, x, cfg, lm)
        result = decode_offline(model, x, cfg, lm)
        assert len(result.finished) == len(everything) == 15
        assert result.best.labels == labels
        assert abs(result.best.score(cfg) - score) < 1e-12

    def test_finished_scores_recompose(self):
        model = tiny_model(4)
        x = feats(28, 4)
        cfg = DecodeConfig(attention_weight=0.4, lm_weight=0.0, **ORACLE_CFG)
        for hyp in decode_offline(model, x, cfg).finished:
            dec, ctc = sequence_scores(model, x, hyp.labels)
            assert abs(hyp.dec_score - dec) < 1e-12
            assert abs(hyp.ctc_score - ctc) < 1e-12

    def test_attention_only_ignores_ctc(self):
        model = tiny_model(5)
        x = feats(28, 5)
        cfg = DecodeConfig(attention_weight=1.0, lm_weight=0.0, **ORACLE_CFG)
        result = decode_offline(model, x, cfg)
        best = max(result.finished, key=lambda h: h.dec_score)
        assert result.best.labels == best.labels


class TestStreaming:
    @pytest.mark.parametrize("piece", [1, 5, 13, 64])
    @pytest.mark.parametrize("cfg", [DecodeConfig(lm_weight=0.3, beam=3), DecodeConfig(attention_weight=1.0, beam=2)])
    def test_streaming_equals_offline(self, piece, cfg):
        model = tiny_model(6, r=-1.0)
        lm = tiny_lm()
        for seed in range(3):
            x = feats(37 + 6 * seed, seed)
            off = decode_offline(model, x, cfg, lm)
            on = decode_streaming(model, x, cfg, lm, piece=piece)
            assert [h.tokens for h in on.finished] == [h.tokens for h in off.finished]
            assert [h.score(cfg) for h in on.finished] == [h.score(cfg) for h in off.finished]
            assert on.best.tokens == off.best.tokens

    def test_beam_waits_for_input(self):
        model = tiny_model(7)
        session = StreamSession(model, DecodeConfig(beam=2))
        assert session.decode_available() is NEED_MORE
        session.push(feats(8))
        assert session.decode_available() is NEED_MORE
        assert session.ctc.max_read <= len(session.ctc)

    def test_endpoints_within_available_outputs(self):
        model = tiny_model(8, r=0.5)
        x = feats(60, 8)
        res = decode_streaming(model, x, DecodeConfig(beam=3), piece=8)
        reduced = -(-len(x) // 4)
        for hyp in res.finished:
            assert list(hyp.endpoints) == sorted(hyp.endpoints)
            assert all(1 <= e <= reduced for e in hyp.endpoints)

    def test_empty_utterance(self):
        res = decode_offline(tiny_model(9), np.zeros((0, 16)))
        assert res.best.labels == () and len(res.finished) == 1


class TestLatency:
    def test_report(self):
        model = tiny_model(10, r=1.0)
        res = decode_streaming(model, feats(48, 10), DecodeConfig(beam=2), piece=8)
        lat = res.latency
        assert lat["algorithmic_ms"] == 80 and lat["frontend_lookahead_ms"] == 0
        assert len(lat["token_emission_ms"]) == len(res.best.tokens) - 1
        assert all(v >= 0 for v in lat["token_emission_ms"])

    def test_max_length_bound(self):
        model = tiny_model(11, r=-30.0)
        x = feats(12, 11)
        res = decode_offline(model, x, DecodeConfig(beam=2, end_detect=False))
        assert all(len(h.labels) <= 2 * 3 for h in res.finished)
