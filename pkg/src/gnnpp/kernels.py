"""Kernel dispatch: the compiled extension when importable, numpy otherwise.

Set ``GNNPP_PURE_PYTHON=1`` to force the fallback. Inputs are coerced to the
contiguous float64 / int64 layouts the compiled kernels require.
"""

import os

import numpy as np

from . import _pykernels

BACKEND = "python"
_impl = _pykernels

if os.environ.get("GNNPP_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _impl  # noqa: F811

        BACKEND = "cython"
    except ImportError:  # pragma: no cover - depends on the build
        _impl = _pykernels


def _f(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def _i(a):
    return np.ascontiguousarray(a, dtype=np.int64)


def use_backend(name):
    """Switch backend at runtime ("cython" or "python"); returns the previous name."""
    global _impl, BACKEND
    previous = BACKEND
    if name == "cython":
        from . import _ckernels

        _impl = _ckernels
    elif name == "python":
        _impl = _pykernels
    else:
        raise ValueError(f"unknown kernel backend {name!r}")
    BACKEND = name
    return previous


def scatter_add(values, index, n):
    return _impl.scatter_add(_f(values), _i(index), int(n))


def segment_softmax(scores, index, n):
    return _impl.segment_softmax(_f(scores), _i(index), int(n))


def segment_softmax_backward(alpha, grad, index, n):
    return _impl.segment_softmax_backward(_f(alpha), _f(grad), _i(index), int(n))


def gatv2_scores(xt, xs, dist, we, att, src, dst, slope):
    return _impl.gatv2_scores(_f(xt), _f(xs), _f(dist), _f(we), _f(att), _i(src), _i(dst), float(slope))


def gatv2_scores_backward(grad, xt, xs, dist, we, att, src, dst, slope):
    return _impl.gatv2_scores_backward(
        _f(grad), _f(xt), _f(xs), _f(dist), _f(we), _f(att), _i(src), _i(dst), float(slope)
    )


def attend(alpha, v, src, dst, n):
    return _impl.attend(_f(alpha), _f(v), _i(src), _i(dst), int(n))


def attend_backward(grad, alpha, v, src, dst):
    return _impl.attend_backward(_f(grad), _f(alpha), _f(v), _i(src), _i(dst))


def set_sum(x):
    x = _f(x)
    if x.ndim != 3:
        raise ValueError(f"set_sum expects a (groups, members, dims) array, got shape {x.shape}")
    return _impl.set_sum(x)


def set_mean(x):
    """Member mean that is bitwise invariant to member order and set duplication."""
    x = _f(x)
    return set_sum(x) / x.shape[1]
