import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from gradcheck import max_rel_error
from onlinectc import autodiff as ad
from onlinectc.autodiff import Graph, NonFiniteError, Tensor

rng = np.random.default_rng(7)


def naive_matmul(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


class TestForward:
    def test_matmul_identity_and_hand_case(self):
        b = rng.normal(size=(2, 3))
        assert np.array_equal(ad.matmul(np.eye(2), b).data, b)
        out = ad.matmul(np.array([[1.0, 2.0], [3.0, 4.0]]), np.array([[1.0], [1.0]]))
        assert np.array_equal(out.data, [[3.0], [7.0]])

    def test_matmul_matches_triple_loop(self):
        a, b = rng.normal(size=(5, 7)), rng.normal(size=(7, 3))
        assert np.max(np.abs(ad.matmul(a, b).data - naive_matmul(a, b))) < 1e-12

    def test_matmul_shape_mismatch(self):
        with pytest.raises(ValueError):
            ad.matmul(np.ones((2, 3)), np.ones((2, 3)))

    def test_softmax_examples(self):
        assert np.allclose(ad.softmax_rows(np.array([[0.0, 0.0]])).data, [[0.5, 0.5]])
        big = ad.softmax_rows(np.array([[1000.0, 0.0]])).data
        assert np.isfinite(big).all() and big[0, 0] == 1.0 and big[0, 1] < 1e-300
        rows = ad.softmax_rows(rng.normal(size=(4, 6))).data
        assert np.all(np.abs(rows.sum(axis=1) - 1.0) < 1e-12)

    def test_softmax_mask_and_empty_rows(self):
        x = rng.normal(size=(3, 4))
        mask = np.array([[1, 0, 1, 0], [0, 0, 0, 0], [1, 1, 1, 1]], dtype=bool)
        out, empty = ad.softmax_rows(x, mask, return_empty=True)
        assert np.array_equal(empty, [False, True, False])
        assert np.all(out.data[~mask] == 0.0)
        assert np.all(out.data[1] == 0.0)
        assert abs(out.data[0].sum() - 1.0) < 1e-12

    def test_sigmoid_values(self):
        assert ad.sigmoid(np.array(0.0)).data == 0.5
        assert abs(float(ad.sigmoid(np.array(-4.0)).data) - 1.0 / (1.0 + np.exp(4.0))) < 1e-15
        assert f"{float(ad.sigmoid(np.array(-4.0)).data):.7f}" == "0.0179862"
        x = rng.normal(scale=20, size=50)
        s = ad.sigmoid(x).data + ad.sigmoid(-x).data
        assert np.all(np.abs(s - 1.0) < 1e-12)
        extreme = ad.sigmoid(np.array([-800.0, 800.0])).data
        assert np.array_equal(extreme, [0.0, 1.0])

    def test_cumprod_exclusive(self):
        assert np.array_equal(ad.cumprod_exclusive_rows(np.ones((1, 3))).data, [[1, 1, 1]])
        assert np.array_equal(ad.cumprod_exclusive_rows(np.full((1, 3), 0.5)).data, [[1, 0.5, 0.25]])
        x = rng.uniform(size=(3, 9))
        y = ad.cumprod_exclusive_rows(x).data
        assert np.all(y[:, 0] == 1.0)
        assert np.max(np.abs(y[:, :-1] * x[:, :-1] - y[:, 1:])) < 1e-12

    def test_layer_norm_moments_and_degenerate_cases(self):
        x = rng.normal(loc=3.0, scale=2.0, size=(5, 16))
        ones, zeros = np.ones(16), np.zeros(16)
        y = ad.layer_norm(x, ones, zeros).data
        assert np.all(np.abs(y.mean(axis=1)) < 1e-9)
        assert np.all(np.abs(y.var(axis=1) - 1.0) < 1e-6)
        assert np.array_equal(ad.layer_norm(np.full((2, 16), 4.2), ones, zeros).data, np.zeros((2, 16)))
        bias = rng.normal(size=16)
        assert np.array_equal(ad.layer_norm(x, zeros, bias).data, np.broadcast_to(bias, x.shape))
        with pytest.raises(ValueError):
            ad.layer_norm(x, np.ones(3), zeros)

    def test_conv2d_matches_direct_loop(self):
        x = rng.normal(size=(2, 7, 5))
        w = rng.normal(size=(3, 2, 3, 3))
        b = rng.normal(size=3)
        out = ad.conv2d(x, w, b).data
        xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
        ref = np.zeros((3, 4, 3))
        for o in range(3):
            for i in range(4):
                for j in range(3):
                    ref[o, i, j] = (xp[:, 2 * i : 2 * i + 3, 2 * j : 2 * j + 3] * w[o]).sum() + b[o]
        assert np.max(np.abs(out - ref)) < 1e-12

    def test_non_finite_forward_is_an_error(self):
        with pytest.raises(NonFiniteError):
            ad.log(np.array([0.0]))

    def test_forward_determinism(self):
        x = rng.normal(size=(4, 8))
        g, b = rng.normal(size=8), rng.normal(size=8)
        a1 = ad.layer_norm(ad.softmax_rows(x), g, b).data
        a2 = ad.layer_norm(ad.softmax_rows(x), g, b).data
        assert a1.tobytes() == a2.tobytes()

    def test_outside_graph_nothing_is_recorded(self):
        w = Tensor(np.ones((2, 2)), requires_grad=True)
        out = w @ np.ones((2, 1))
        assert out.node is None and not out.requires_grad


class TestBackward:
    def test_linear_map_gradient(self):
        w = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        x = rng.normal(size=(4, 1))
        with Graph({"w": w}) as g:
            grads = g.backward((w @ x).sum())
        assert np.array_equal(grads["w"], np.tile(x.T, (3, 1)))

    def test_untracked_loss_errors(self):
        with Graph() as g:
            with pytest.raises(ValueError):
                g.backward(Tensor(np.array(1.0)))
        w = Tensor(np.ones(3), requires_grad=True)
        with Graph({"w": w}) as g:
            with pytest.raises(ValueError):
                g.backward(w * 2.0)

    def test_stop_gradient_is_opaque(self):
        w = Tensor(rng.normal(size=(3,)), requires_grad=True)
        with Graph({"w": w}) as g:
            sg = ad.stop_gradient(w)
            assert np.array_equal(sg.data, w.data)
            loss = (sg * w).sum() + (ad.stop_gradient(w * 3.0) * 2.0).sum()
            grads = g.backward(loss)
        # only the direct factor w carries gradient
        assert np.array_equal(grads["w"], w.data)
        v = Tensor(rng.normal(size=(3,)), requires_grad=True)
        with Graph({"v": v}) as g:
            grads = g.backward(ad.exp(ad.stop_gradient(v)).sum() + (v * 0.0).sum())
        assert np.array_equal(grads["v"], np.zeros(3))

    def test_backward_visits_reverse_recording_order(self):
        x = Tensor(np.array([0.3, -0.2]), requires_grad=True)
        with Graph({"x": x}) as g:
            loss = ad.sigmoid(ad.exp(x) * x).sum()
            order = [id(n.out) for n in g.nodes]
            assert order == sorted(order, key=order.index)  # recorded once each
            assert g.nodes[-1].out is loss
            g.backward(loss)


def _weighted(out, weights):
    return (out * weights).sum()


OP_CASES = {
    "add_broadcast": (lambda a, b: _weighted(a + b, W43), [(4, 3), (3,)]),
    "mul_broadcast": (lambda a, b: _weighted(a * b, W43), [(4, 3), (4, 1)]),
    "div_by_constant": (lambda a: _weighted(a / 3.0, W43), [(4, 3)]),
    "matmul": (lambda a, b: _weighted(a @ b, W43), [(4, 5), (5, 3)]),
    "batched_matmul": (lambda a, b: (ad.matmul(a, b) * W243).sum(), [(2, 4, 5), (2, 5, 3)]),
    "getitem": (lambda a: _weighted(a[1:3], W23x), [(4, 3)]),
    "fancy_getitem": (lambda a: (a[np.array([0, 2, 2])] * W33).sum(), [(4, 3)]),
    "transpose_reshape": (lambda a: _weighted(a.T.reshape(4, 3), W43), [(4, 3)]),
    "concat": (lambda a, b: (ad.concat([a, b]) * W73).sum(), [(4, 3), (3, 3)]),
    "relu": (lambda a: _weighted(ad.relu(a), W43), [(4, 3)]),
    "sigmoid": (lambda a: _weighted(ad.sigmoid(a), W43), [(4, 3)]),
    "exp": (lambda a: _weighted(ad.exp(a), W43), [(4, 3)]),
    "log": (lambda a: _weighted(ad.log(a * a + 0.5), W43), [(4, 3)]),
    "softmax": (lambda a: _weighted(ad.softmax_rows(a), W43), [(4, 3)]),
    "masked_softmax": (lambda a: _weighted(ad.softmax_rows(a, MASK43), W43), [(4, 3)]),
    "log_softmax": (lambda a: _weighted(ad.log_softmax(a), W43), [(4, 3)]),
    "cumprod": (lambda a: _weighted(ad.cumprod_exclusive_rows(ad.sigmoid(a)), W43), [(4, 3)]),
    "layer_norm": (lambda a, g, b: _weighted(ad.layer_norm(a, g, b), W43), [(4, 3), (3,), (3,)]),
    "mean": (lambda a: a.mean(axis=0).sum() * 3.0 + (a * a).mean(), [(4, 3)]),
    "embedding": (lambda t: (ad.embedding(t, np.array([2, 0, 2])) * W33).sum(), [(4, 3)]),
    "conv2d": (lambda x, w, b: (ad.conv2d(x, w, b) * WCONV).sum(), [(2, 5, 4), (3, 2, 3, 3), (3,)]),
}

W43 = rng.normal(size=(4, 3))
W23x = rng.normal(size=(2, 3))
W33 = rng.normal(size=(3, 3))
W73 = rng.normal(size=(7, 3))
W243 = rng.normal(size=(2, 4, 3))
WCONV = rng.normal(size=(3, 3, 2))
MASK43 = np.array([[1, 1, 0], [0, 1, 1], [1, 0, 1], [1, 1, 1]], dtype=bool)


@pytest.mark.parametrize("name", sorted(OP_CASES))
def test_op_gradients_match_finite_differences(name):
    fn, shapes = OP_CASES[name]
    arrays = [np.random.default_rng(zlib.crc32(name.encode())).normal(size=s) for s in shapes]
    assert max_rel_error(fn, arrays, h=1e-5) < 1e-4


def test_cumprod_gradient_with_exact_zeros():
    x = np.array([[0.4, 0.0, 0.7, 0.2]])
    fn = lambda a: _weighted(ad.cumprod_exclusive_rows(a), W43[:1, :].repeat(2, axis=1)[:, :4])  # noqa: E731
    assert max_rel_error(fn, [x], h=1e-6) < 1e-4


def test_dropout_gradient_uses_same_mask():
    x = rng.normal(size=(4, 3))
    fn = lambda a: _weighted(ad.dropout(a, 0.5, np.random.default_rng(3)), W43)  # noqa: E731
    assert max_rel_error(fn, [x]) < 1e-4


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (3, 5), elements=st.floats(-50, 50)))
def test_softmax_rows_property(x):
    out = ad.softmax_rows(x).data
    assert np.all(out >= 0)
    assert np.all(np.abs(out.sum(axis=1) - 1.0) < 1e-12)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (2, 6), elements=st.floats(0, 1)))
def test_cumprod_recurrence_property(x):
    y = ad.cumprod_exclusive_rows(x).data
    assert np.all(y[:, 0] == 1.0)
    assert np.all(np.abs(y[:, :-1] * x[:, :-1] - y[:, 1:]) < 1e-12)
    assert np.all((y >= 0) & (y <= 1))
