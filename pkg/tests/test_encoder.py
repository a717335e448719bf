import numpy as np
import pytest

from oracles import chunk_output, influencing_frames
from onlinectc.autodiff import Graph, Tensor
from onlinectc.encoder import (
    ISOLATED,
    STATE_REUSE,
    ChunkCache,
    ChunkConfig,
    ChunkOrderError,
    EncoderStream,
    encode,
    encode_chunk,
    front_end,
    init_encoder,
    receptive_field,
    split_chunks,
)

FEAT = 6
CFG = ChunkConfig(8, 8, 8)


def make_encoder(layers=2, frontend="conv", seed=0):
    return init_encoder(np.random.default_rng(seed), FEAT, 16, 2, 24, layers, frontend=frontend, channels=3)


def features(t, seed=1):
    return np.random.default_rng(seed).normal(size=(t, FEAT))


class TestChunking:
    def test_split_chunks_full_example(self):
        spans = split_chunks(192, ChunkConfig(64, 64, 64))
        assert [s.central for s in spans] == [(0, 64), (64, 128), (128, 192)]
        assert [s.window for s in spans] == [(0, 128), (0, 192), (64, 192)]

    def test_split_chunks_remainder(self):
        spans = split_chunks(100, ChunkConfig(64, 64, 64))
        assert len(spans) == 2 and spans[1].central == (64, 100)

    def test_centrals_partition_the_utterance(self):
        for t in (1, 7, 8, 9, 63, 100):
            covered = [i for s in split_chunks(t, CFG) for i in range(*s.central)]
            assert covered == list(range(t))

    def test_latency_accessor(self):
        assert ChunkConfig(32, 32, 32).latency_ms == 320
        assert ChunkConfig(64, 64, 64).latency_ms == 640

    def test_config_validation(self):
        with pytest.raises(ValueError):
            ChunkConfig(8, 0, 8)
        with pytest.raises(ValueError):
            ChunkConfig(6, 8, 8)

    def test_receptive_field_arithmetic(self):
        cfg = ChunkConfig(64, 64, 64)
        assert receptive_field(cfg, 12, STATE_REUSE) == 768
        assert receptive_field(cfg, 1, STATE_REUSE) == receptive_field(cfg, 1, ISOLATED) == 64


class TestFrontEnd:
    @pytest.mark.parametrize("t, expected", [(16, 4), (100, 25), (1, 1), (5, 2)])
    def test_time_reduction(self, t, expected):
        for kind in ("conv", "stack"):
            assert front_end(make_encoder(frontend=kind), features(t)).shape == (expected, 16)

    def test_conv_receptive_field_probe(self):
        params = make_encoder()
        feats = features(40)
        base = front_end(params, feats).data
        for j in (2, 5, 7):
            reach = set()
            for t in range(40):
                probe = feats.copy()
                probe[t] += 1.0
                if not np.array_equal(front_end(params, probe).data[j], base[j]):
                    reach.add(t)
            lo, hi = 4 * j - params.front.left_reach, 4 * j + params.front.right_reach
            assert reach == set(range(lo, hi + 1))
        assert params.front.lookahead == 0

    def test_dim_mismatch(self):
        with pytest.raises(ValueError, match="6"):
            front_end(make_encoder(), np.zeros((8, 5)))


class TestEncoder:
    def test_shapes_and_coverage(self):
        params = make_encoder()
        for t in (8, 30, 64):
            out = encode(params, features(t), CFG)
            assert out.shape == (-(-t // 4), 16)
        cache = ChunkCache.empty(2, 16)
        feats = features(30)
        sizes = [encode_chunk(params, cache, feats, s, CFG, STATE_REUSE).shape[0] for s in split_chunks(30, CFG)]
        assert sizes == [2, 2, 2, 2]  # 30 frames -> 8 reduced, each emitted once

    def test_first_chunk_modes_agree(self):
        params = make_encoder()
        feats = features(64)
        a = chunk_output(params, feats, CFG, ISOLATED, 0)
        b = chunk_output(params, feats, CFG, STATE_REUSE, 0)
        assert np.array_equal(a, b)

    def test_out_of_order_chunk(self):
        params = make_encoder()
        spans = split_chunks(32, CFG)
        with pytest.raises(ChunkOrderError):
            encode_chunk(params, ChunkCache.empty(2, 16), features(32), spans[1], CFG, STATE_REUSE)

    def test_causal_isolation(self):
        params = make_encoder()
        feats = features(64)
        span = split_chunks(64, CFG)[4]
        base = chunk_output(params, feats, CFG, ISOLATED, 4)
        other = features(64, seed=9)
        w0, w1 = span.window
        other[w0:w1] = feats[w0:w1]
        assert np.array_equal(chunk_output(params, other, CFG, ISOLATED, 4), base)

    def test_cache_correctness_single_layer(self):
        # documented tolerance: BLAS rounding depends on operand shapes
        params = make_encoder(layers=1, frontend="stack")
        feats = features(72)
        a = encode(params, feats, CFG, ISOLATED).data
        b = encode(params, feats, CFG, STATE_REUSE).data
        assert np.max(np.abs(a - b)) < 1e-12

    def test_modes_differ_with_two_layers(self):
        params = make_encoder(layers=2, frontend="stack")
        feats = features(72)
        a = encode(params, feats, CFG, ISOLATED).data
        b = encode(params, feats, CFG, STATE_REUSE).data
        assert np.max(np.abs(a - b)) > 1e-6

    def test_cache_keeps_recent_central_states(self):
        params = make_encoder()
        cache = ChunkCache.empty(2, 16)
        feats = features(64)
        for span in split_chunks(64, CFG):
            encode_chunk(params, cache, feats, span, CFG, STATE_REUSE)
            assert all(len(s) == min(CFG.reduced_left, 2 * (span.index + 1)) for s in cache.states)
            assert all(isinstance(s, np.ndarray) for s in cache.states)

    def test_streaming_matches_batch_encode(self):
        params = make_encoder()
        feats = features(61)
        full = encode(params, feats, CFG).data
        stream = EncoderStream(params, CFG)
        outs = []
        for start in range(0, 61, 5):
            outs += stream.push(feats[start : start + 5])
        outs += stream.finish()
        assert np.array_equal(np.concatenate([o.data for o in outs]), full)

    def test_latency_bound_with_truncated_stream(self):
        params = make_encoder()
        feats = features(64)
        full = encode(params, feats, CFG).data
        for span in split_chunks(64, CFG)[:-1]:
            stream = EncoderStream(params, CFG)
            needed = span.central[1] + CFG.right + params.front.lookahead
            outs = stream.push(feats[:needed])
            assert len(outs) == span.index + 1
            r0 = span.central[0] // 4
            assert np.array_equal(outs[-1].data, full[r0 : r0 + 2])


class TestReceptiveFieldProbes:
    """Exact left/right reach of a chunk's outputs, found by single-frame perturbation."""

    @pytest.mark.parametrize("frontend, extra", [("stack", 0), ("conv", 3)])
    def test_state_reuse_reaches_layers_times_left(self, frontend, extra):
        params = make_encoder(layers=2, frontend=frontend)
        feats = features(64)
        span = split_chunks(64, CFG)[5]
        hits = influencing_frames(params, feats, CFG, STATE_REUSE, 5)
        assert min(hits) == span.central[0] - receptive_field(CFG, 2, STATE_REUSE) - extra
        assert max(hits) == span.central[1] + CFG.right - 1

    @pytest.mark.parametrize("frontend", ["stack", "conv"])
    def test_isolated_reaches_left_context_only(self, frontend):
        params = make_encoder(layers=2, frontend=frontend)
        feats = features(64)
        span = split_chunks(64, CFG)[5]
        hits = influencing_frames(params, feats, CFG, ISOLATED, 5)
        assert min(hits) == span.central[0] - receptive_field(CFG, 2, ISOLATED)
        assert max(hits) == span.central[1] + CFG.right - 1


def test_cached_states_carry_no_gradient():
    params = make_encoder(layers=2, frontend="stack")
    feats = features(32)
    spans = split_chunks(32, CFG)
    weights = np.random.default_rng(3).normal(size=(2, 16))
    wq = params.layers[0].attn.wq  # reaches chunk 1 both directly and via cached layer-1 inputs
    idx = (0, 1)

    def chunk1_loss(cache_from=None):
        cache = ChunkCache.empty(2, 16)
        encode_chunk(params, cache, feats, spans[0], CFG, STATE_REUSE)
        if cache_from is not None:
            cache.states = [s.copy() for s in cache_from]
        out = encode_chunk(params, cache, feats, spans[1], CFG, STATE_REUSE)
        return float((out.data * weights).sum()), cache

    # analytic gradient through chunk 1 with chunk 0 also on the tape
    with Graph({"wq": wq}) as g:
        cache = ChunkCache.empty(2, 16)
        encode_chunk(params, cache, feats, spans[0], CFG, STATE_REUSE)
        out = encode_chunk(params, cache, feats, spans[1], CFG, STATE_REUSE)
        grad = g.backward((out * weights).sum())["wq"][idx]

    # finite differences with the cache frozen at the unperturbed values
    frozen = ChunkCache.empty(2, 16)
    encode_chunk(params, frozen, feats, spans[0], CFG, STATE_REUSE)
    h = 1e-6
    vals = []
    for sign in (1, -1):
        wq.data[idx] += sign * h
        vals.append(chunk1_loss(frozen.states)[0])
        wq.data[idx] -= sign * h
    frozen_fd = (vals[0] - vals[1]) / (2 * h)
    vals = []
    for sign in (1, -1):
        wq.data[idx] += sign * h
        vals.append(chunk1_loss()[0])
        wq.data[idx] -= sign * h
    full_fd = (vals[0] - vals[1]) / (2 * h)
    assert abs(grad - frozen_fd) <= 1e-6 * max(1.0, abs(frozen_fd))
    assert abs(full_fd - frozen_fd) > 1e-6  # the cache path exists in value, not in gradient
    assert Tensor(cache.states[0]).node is None
