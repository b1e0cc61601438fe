"""Minimal reverse-mode differentiation over float64 numpy arrays.

Each op returns a :class:`Tensor` that remembers its parents and a closure
mapping the output gradient to parent gradients. :meth:`Tensor.backward`
walks the tape in reverse topological order and accumulates into
``Parameter.grad``. Only the ops the post-processing models need exist.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from . import kernels


class NumericalError(FloatingPointError):
    """Raised when a forward or backward pass produces NaN or Inf."""


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, parents=(), backward=None, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self._parents = parents
        self._backward = backward
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.shape}, name={self.name!r})"

    def numpy(self):
        return self.data

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a gradient needs a scalar output")
            grad = np.ones_like(self.data)
        check_finite(self.data, "forward output")

        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        grads = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg
        for node in order:
            if node._backward is None and node.grad is not None:
                check_finite(node.grad, f"gradient of {node.name or 'leaf'}")

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


class Parameter(Tensor):
    """Trainable leaf; ``grad`` always has the value's shape once zeroed."""

    __slots__ = ()

    def __init__(self, data, name=None):
        super().__init__(np.array(data, dtype=np.float64), requires_grad=True, name=name)
        self.grad = np.zeros_like(self.data)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def check_finite(arr, what="value"):
    if not np.all(np.isfinite(arr)):
        raise NumericalError(f"non-finite {what}")


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# -- elementwise ---------------------------------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return Tensor(
        a.data + b.data,
        parents=(a, b),
        backward=lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def neg(a):
    return Tensor(-a.data, parents=(a,), backward=lambda g: (-g,))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return Tensor(
        a.data * b.data,
        parents=(a, b),
        backward=lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


_SMALLEST_POSITIVE = np.nextafter(0.0, 1.0)


def softplus(x):
    d = x.data
    out = np.maximum(d, 0.0) + np.log1p(np.exp(-np.abs(d)))
    # below about -745 the true value is not representable; keep it positive
    out = np.maximum(out, _SMALLEST_POSITIVE)
    sig = 0.5 * (1.0 + np.tanh(0.5 * d))
    return Tensor(out, parents=(x,), backward=lambda g: (g * sig,))


def elu(x, alpha=1.0):
    d = x.data
    neg_part = alpha * np.expm1(np.minimum(d, 0.0))
    out = np.where(d > 0.0, d, neg_part)
    slope = np.where(d > 0.0, 1.0, neg_part + alpha)
    return Tensor(out, parents=(x,), backward=lambda g: (g * slope,))


def leaky_relu(x, slope=0.2):
    d = x.data
    s = np.where(d < 0.0, slope, 1.0)
    return Tensor(d * s, parents=(x,), backward=lambda g: (g * s,))


def exp(x):
    out = np.exp(x.data)
    return Tensor(out, parents=(x,), backward=lambda g: (g * out,))


ACTIVATIONS = {
    "softplus": softplus,
    "elu": elu,
    "leaky_relu": leaky_relu,
    "exp": exp,
}


def activation(x, kind):
    try:
        return ACTIVATIONS[kind](x)
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}; choose from {sorted(ACTIVATIONS)}") from None


# -- linear algebra & shape ------------------------------------------------------


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    return Tensor(
        a.data @ b.data,
        parents=(a, b),
        backward=lambda g: (g @ b.data.T, a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])),
    )


def _rowwise_matmul(a, b):
    # einsum without BLAS: each output row depends only on its own input row,
    # bit for bit, regardless of how many rows are stacked.
    if a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    return Tensor(
        np.einsum("...i,io->...o", a.data, b.data),
        parents=(a, b),
        backward=lambda g: (
            np.einsum("...o,io->...i", g, b.data),
            np.einsum("ri,ro->io", a.data.reshape(-1, a.shape[-1]), g.reshape(-1, g.shape[-1])),
        ),
    )


def dense(x, W, b=None, rowwise=False):
    """``x @ W + b`` over the last axis of ``x``."""
    x = as_tensor(x)
    if x.shape[-1] != W.shape[0]:
        raise ShapeError(f"dense: input dim {x.shape[-1]} does not match weight {W.shape}")
    if b is not None and b.shape != (W.shape[1],):
        raise ShapeError(f"dense: bias shape {b.shape} does not match weight {W.shape}")
    y = _rowwise_matmul(x, W) if rowwise else matmul(x, W)
    return y if b is None else add(y, b)


def reshape(x, shape):
    old = x.shape
    return Tensor(x.data.reshape(shape), parents=(x,), backward=lambda g: (g.reshape(old),))


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, cuts, axis=axis))

    return Tensor(np.concatenate([t.data for t in tensors], axis=axis), parents=tuple(tensors), backward=backward)


def take(x, index, axis=-1):
    """Select ``index`` (int or slice) along ``axis``; dimension dropped for ints."""
    sl = [slice(None)] * x.data.ndim
    sl[axis] = index
    sl = tuple(sl)

    def backward(g):
        full = np.zeros_like(x.data)
        full[sl] = g
        return (full,)

    return Tensor(x.data[sl], parents=(x,), backward=backward)


def tsum(x, axis=None):
    shape = x.shape

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return Tensor(x.data.sum(axis=axis), parents=(x,), backward=backward)


def mean(x):
    n = x.data.size
    return mul(tsum(x), 1.0 / n)


# -- indexing --------------------------------------------------------------------


def gather_rows(x, index):
    index = np.asarray(index, dtype=np.int64)
    n = x.shape[0]
    tail = x.shape[1:]

    def backward(g):
        flat = kernels.scatter_add(g.reshape(g.shape[0], -1), index, n)
        return (flat.reshape((n,) + tail),)

    return Tensor(x.data[index], parents=(x,), backward=backward)


def embedding_lookup(table, ids):
    """Rows of ``table`` for integer ``ids`` (scalar or array)."""
    ids_arr = np.asarray(ids)
    if ids_arr.size and (ids_arr.min() < 0 or ids_arr.max() >= table.shape[0]):
        bad = ids_arr[(ids_arr < 0) | (ids_arr >= table.shape[0])]
        raise LookupError(f"embedding id(s) {sorted(set(bad.tolist()))[:5]} outside table of {table.shape[0]} rows")
    if ids_arr.ndim == 0:
        return take(gather_rows(table, ids_arr.reshape(1)), 0, axis=0)
    return gather_rows(table, ids_arr)


def scatter_rows(x, index, n):
    index = np.asarray(index, dtype=np.int64)
    return Tensor(
        kernels.scatter_add(x.data, index, n),
        parents=(x,),
        backward=lambda g: (g[index],),
    )


def set_mean(x):
    """Mean over axis 1 of a (groups, members, dims) tensor, exactly rounded."""
    n = x.shape[1]

    def backward(g):
        return (np.broadcast_to(g[:, None, :] / n, x.shape).copy(),)

    return Tensor(kernels.set_mean(x.data), parents=(x,), backward=backward)


def segment_softmax(scores, segments, n_segments):
    """Softmax of ``scores`` (E, H) within groups sharing a ``segments`` id.

    Edges whose segment is empty cannot exist; segments with no edges simply
    receive nothing.
    """
    segments = np.asarray(segments, dtype=np.int64)
    scores = as_tensor(scores)
    squeeze = scores.data.ndim == 1
    s = scores.data[:, None] if squeeze else scores.data
    alpha = kernels.segment_softmax(s, segments, n_segments)

    def backward(g):
        g2 = g[:, None] if squeeze else g
        out = kernels.segment_softmax_backward(alpha, g2, segments, n_segments)
        return (out[:, 0] if squeeze else out,)

    return Tensor(alpha[:, 0] if squeeze else alpha, parents=(scores,), backward=backward)


def gatv2_scores(xt, xs, edge_attr, we, att, src, dst, slope=0.2):
    """Per-edge, per-head score ``att_h . leaky_relu(xt[dst] + xs[src] + attr * we)``."""
    src = np.asarray(src, dtype=np.int64)
    dst = np.asarray(dst, dtype=np.int64)
    dist = np.asarray(edge_attr, dtype=np.float64).reshape(-1)
    H, C = att.shape
    if xt.shape[1] != H * C or xs.shape[1] != H * C or we.shape != (H * C,):
        raise ShapeError("gatv2_scores: head/channel layout mismatch")
    out = kernels.gatv2_scores(xt.data, xs.data, dist, we.data, att.data, src, dst, slope)

    def backward(g):
        return kernels.gatv2_scores_backward(g, xt.data, xs.data, dist, we.data, att.data, src, dst, slope)

    return Tensor(out, parents=(xt, xs, we, att), backward=backward)


def attend(alpha, values, src, dst, n):
    """Sum over incoming edges of ``alpha[e, h] * values[src[e], head h]``."""
    src = np.asarray(src, dtype=np.int64)
    dst = np.asarray(dst, dtype=np.int64)
    out = kernels.attend(alpha.data, values.data, src, dst, n)

    def backward(g):
        return kernels.attend_backward(g, alpha.data, values.data, src, dst)

    return Tensor(out, parents=(alpha, values), backward=backward)


# -- initialisation & checkpoints -------------------------------------------------


def init_dense(rng, fan_in, fan_out, name):
    bound = 1.0 / np.sqrt(fan_in)
    W = Parameter(rng.uniform(-bound, bound, size=(fan_in, fan_out)), name=f"{name}.W")
    b = Parameter(np.zeros(fan_out), name=f"{name}.b")
    return W, b


def init_embedding(rng, n, dim, name):
    return Parameter(rng.standard_normal((n, dim)) * 0.05, name=name)


def params_to_json(params):
    """Ordered list of ``{name, shape, values}`` records."""
    return [
        {"name": p.name, "shape": list(p.shape), "values": p.data.ravel().tolist()}
        for p in params
    ]


def params_from_json(records, params):
    by_name = {r["name"]: r for r in records}
    for p in params:
        try:
            r = by_name[p.name]
        except KeyError:
            raise KeyError(f"checkpoint has no parameter {p.name!r}") from None
        if tuple(r["shape"]) != p.shape:
            raise ShapeError(f"parameter {p.name}: checkpoint shape {r['shape']} != model shape {list(p.shape)}")
        p.data = np.array(r["values"], dtype=np.float64).reshape(p.shape)
        p.zero_grad()


def save_params(path, params):
    Path(path).write_text(json.dumps({"format": "gnnpp-params/1", "params": params_to_json(params)}))


def load_params(path, params):
    blob = json.loads(Path(path).read_text())
    params_from_json(blob["params"], params)
