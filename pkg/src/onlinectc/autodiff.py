"""Dense float64 tensors with tape-based reverse-mode differentiation.

Only the operations the encoder, decoder and losses need are provided.
Recording happens only inside an active :class:`Graph`; outside of one every
operation is a plain numpy computation, which keeps decoding cheap.

    >>> w = Tensor(np.ones((2, 2)), requires_grad=True)
    >>> with Graph() as g:
    ...     loss = (w @ Tensor([[1.0], [2.0]])).sum()
    ...     grads = g.backward(loss)
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "Graph",
    "NonFiniteError",
    "record",
    "active_graph",
    "matmul",
    "add",
    "mul",
    "concat",
    "relu",
    "sigmoid",
    "exp",
    "log",
    "softmax_rows",
    "log_softmax",
    "cumprod_exclusive_rows",
    "layer_norm",
    "stop_gradient",
    "dropout",
    "conv2d",
    "embedding",
    "backward",
]

LN_EPS = 1e-12


class NonFiniteError(FloatingPointError):
    """A forward operation produced NaN or Inf."""


class Tensor:
    """A float64 array, optionally tracked for gradients.

    ``node`` points at the tape entry that produced the tensor; leaves and
    untracked tensors have ``node = None``.
    """

    __slots__ = ("data", "requires_grad", "grad", "node", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.node = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, -_as_tensor(other))

    def __rsub__(self, other):
        return add(_as_tensor(other), -self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division is only defined by constants")
        return mul(self, 1.0 / np.asarray(other, dtype=np.float64))

    def __neg__(self):
        return record(-self.data, (self,), lambda g: (-g,))

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return _getitem(self, index)

    @property
    def T(self):
        return self.transpose()

    def transpose(self, *axes):
        axes = axes or tuple(reversed(range(self.ndim)))
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inverse = tuple(np.argsort(axes))
        return record(self.data.transpose(axes), (self,), lambda g: (g.transpose(inverse),))

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        return record(self.data.reshape(shape), (self,), lambda g: (g.reshape(old),))

    def sum(self, axis=None, keepdims=False):
        old = self.shape

        def grad_fn(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, old).copy(),)

        return record(self.data.sum(axis=axis, keepdims=keepdims), (self,), grad_fn)

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else self.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)


class _Node:
    __slots__ = ("out", "parents", "grad_fn")

    def __init__(self, out, parents, grad_fn):
        self.out = out
        self.parents = parents
        self.grad_fn = grad_fn


class Graph:
    """Recording tape plus a name -> parameter registry.

    Operations are appended in execution order, so the recording order is a
    valid topological order and :meth:`backward` simply walks it in reverse.
    """

    _stack: list["Graph"] = []

    def __init__(self, params=None):
        self.nodes: list[_Node] = []
        self.params: dict[str, Tensor] = {}
        if params:
            for name, p in params.items():
                self.register(name, p)

    def register(self, name, tensor):
        if not tensor.requires_grad:
            raise ValueError(f"parameter {name!r} does not require grad")
        self.params[name] = tensor
        return tensor

    def __enter__(self):
        Graph._stack.append(self)
        return self

    def __exit__(self, *exc):
        Graph._stack.remove(self)
        return False

    def backward(self, loss):
        return backward(self, loss)


def active_graph():
    return Graph._stack[-1] if Graph._stack else None


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def record(out_data, parents, grad_fn):
    """Wrap a forward result and log its gradient rule on the active tape.

    ``grad_fn`` maps the upstream gradient to one gradient (or ``None``) per
    parent. This is also the extension point for composite ops such as the
    CTC loss.
    """
    out_data = np.asarray(out_data, dtype=np.float64)
    if not np.isfinite(out_data).all():
        raise NonFiniteError("non-finite value produced in forward pass")
    graph = active_graph()
    parents = tuple(_as_tensor(p) for p in parents)
    if graph is None or not any(p.requires_grad for p in parents):
        return Tensor(out_data)
    out = Tensor(out_data, requires_grad=True)
    out.node = _Node(out, parents, grad_fn)
    graph.nodes.append(out.node)
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    return record(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    return record(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def matmul(a, b):
    """Matrix product; leading axes broadcast as in ``np.matmul``."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul expects at least 2-d operands")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def grad_fn(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return record(ad @ bd, (a, b), grad_fn)


def _getitem(x, index):
    shape = x.shape

    parts = index if isinstance(index, tuple) else (index,)
    fancy = any(isinstance(p, (np.ndarray, list)) for p in parts)

    def grad_fn(g):
        out = np.zeros(shape)
        if fancy:
            np.add.at(out, index, g)
        else:
            out[index] = g
        return (out,)

    return record(x.data[index], (x,), grad_fn)


def concat(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return record(
        np.concatenate([t.data for t in tensors], axis=axis),
        tensors,
        lambda g: tuple(np.split(g, sizes, axis=axis)),
    )


def embedding(table, ids):
    """Row lookup ``table[ids]`` with scatter-add gradient."""
    ids = np.asarray(ids, dtype=np.int64)
    return _getitem(table, ids)


def relu(x):
    x = _as_tensor(x)
    mask = x.data > 0
    return record(x.data * mask, (x,), lambda g: (g * mask,))


def _sigmoid(z):
    # Split by sign so exp never overflows.
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x):
    x = _as_tensor(x)
    s = _sigmoid(x.data)
    return record(s, (x,), lambda g: (g * s * (1.0 - s),))


def exp(x):
    x = _as_tensor(x)
    e = np.exp(x.data)
    return record(e, (x,), lambda g: (g * e,))


def log(x):
    x = _as_tensor(x)
    d = x.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(d)
    return record(out, (x,), lambda g: (g / d,))


def softmax_rows(x, mask=None, return_empty=False):
    """Softmax over the last axis.

    ``mask`` marks allowed entries. Masked entries come out as exactly 0 and a
    row with nothing allowed is all zeros; with ``return_empty=True`` the
    boolean array of such rows is returned alongside the result.
    """
    x = _as_tensor(x)
    z = x.data
    if mask is None:
        m = z.max(axis=-1, keepdims=True)
        e = np.exp(z - m)
        s = e / e.sum(axis=-1, keepdims=True)
        empty = np.zeros(z.shape[:-1], dtype=bool)
    else:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), z.shape)
        empty = ~mask.any(axis=-1)
        zm = np.where(mask, z, -np.inf)
        m = zm.max(axis=-1, keepdims=True)
        m[empty] = 0.0
        e = np.where(mask, np.exp(np.where(mask, z - m, 0.0)), 0.0)
        denom = e.sum(axis=-1, keepdims=True)
        denom[empty] = 1.0
        s = e / denom

    def grad_fn(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    out = record(s, (x,), grad_fn)
    return (out, empty) if return_empty else out


def log_softmax(x):
    x = _as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    s = np.exp(out)
    return record(out, (x,), lambda g: (g - s * g.sum(axis=-1, keepdims=True),))


def cumprod_exclusive_rows(x):
    """Row-wise exclusive cumulative product ``[1, x0, x0*x1, ...]``.

    The gradient is computed without dividing by ``x`` so zero entries are
    handled exactly.
    """
    x = _as_tensor(x)
    d = x.data
    n = d.shape[-1]
    y = np.ones_like(d)
    if n > 1:
        y[..., 1:] = np.cumprod(d[..., :-1], axis=-1)

    def grad_fn(g):
        # dL/dx_k = y_k * S_k with S_k = g_{k+1} + x_{k+1} * S_{k+1}
        out = np.zeros_like(d)
        acc = np.zeros(d.shape[:-1])
        for k in range(n - 2, -1, -1):
            acc = g[..., k + 1] + d[..., k + 1] * acc
            out[..., k] = y[..., k] * acc
        return (out,)

    return record(y, (x,), grad_fn)


def layer_norm(x, gain, bias, eps=LN_EPS):
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    d = x.data
    if gain.shape != (d.shape[-1],) or bias.shape != (d.shape[-1],):
        raise ValueError("layer_norm gain/bias must match the last dimension")
    mu = d.mean(axis=-1, keepdims=True)
    xc = d - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gd = gain.data

    def grad_fn(g):
        n = d.shape[-1]
        gx = g * gd
        dx = inv / n * (n * gx - gx.sum(axis=-1, keepdims=True)
                        - xhat * (gx * xhat).sum(axis=-1, keepdims=True))
        lead = tuple(range(d.ndim - 1))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return record(xhat * gd + bias.data, (x, gain, bias), grad_fn)


def stop_gradient(x):
    """Same values, no gradient path (the SG operator)."""
    return Tensor(_as_tensor(x).data)


def dropout(x, rate, rng):
    """Inverted dropout; identity when ``rate == 0`` or ``rng`` is None."""
    if rate <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return mul(x, keep)


def conv2d(x, weight, bias, stride=2, pad=1):
    """2-d convolution of a ``(C_in, H, W)`` map with ``(C_out, C_in, kh, kw)`` filters."""
    x, weight, bias = _as_tensor(x), _as_tensor(weight), _as_tensor(bias)
    c_in, h, w = x.shape
    c_out, c_in_w, kh, kw = weight.shape
    if c_in != c_in_w:
        raise ValueError(f"conv2d channel mismatch: {c_in} vs {c_in_w}")
    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ValueError(f"input {h}x{w} too small for a {kh}x{kw} kernel")
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    win = win[:, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    # (c_in, ho, wo, kh, kw) -> (ho*wo, c_in*kh*kw)
    cols = np.ascontiguousarray(win.transpose(1, 2, 0, 3, 4)).reshape(ho * wo, -1)
    wmat = weight.data.reshape(c_out, -1)
    out = (cols @ wmat.T + bias.data).reshape(ho, wo, c_out).transpose(2, 0, 1)

    def grad_fn(g):
        gm = g.transpose(1, 2, 0).reshape(ho * wo, c_out)
        gw = (gm.T @ cols).reshape(weight.shape)
        gb = gm.sum(axis=0)
        gcols = (gm @ wmat).reshape(ho, wo, c_in, kh, kw)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, i : i + stride * ho : stride, j : j + stride * wo : stride] += (
                    gcols[:, :, :, i, j].transpose(2, 0, 1)
                )
        return gxp[:, pad : pad + h, pad : pad + w], gw, gb

    return record(out, (x, weight, bias), grad_fn)


def backward(graph, loss):
    """Reverse-mode sweep over ``graph``; returns ``{name: grad}`` for registered params.

    The returned gradients cover this sweep only. Leaf tensors that require
    grad additionally accumulate into ``.grad`` across sweeps.
    """
    if loss.data.size != 1:
        raise ValueError("backward expects a scalar loss")
    if not loss.requires_grad or loss.node is None:
        raise ValueError("loss is not tracked by any graph; nothing to differentiate")
    grads = {id(loss): np.ones_like(loss.data)}
    leaves = {}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        for parent, pg in zip(node.parents, node.grad_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
            if parent.node is None:
                leaves[key] = parent
    for key, leaf in leaves.items():
        g = grads[key]
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
    return {
        name: grads[id(p)] if id(p) in leaves else np.zeros_like(p.data)
        for name, p in graph.params.items()
    }
