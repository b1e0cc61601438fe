import numpy as np
import pytest

from gnnpp import _pykernels, kernels

ck = pytest.importorskip("gnnpp._ckernels")


def _graph(rng, n=15, e=60):
    dst = np.concatenate([np.arange(n), rng.integers(0, n, e - n)])
    src = rng.integers(0, n, e)
    return src.astype(np.int64), dst.astype(np.int64), n


@pytest.mark.parametrize("seed", range(5))
def test_backends_agree(seed):
    rng = np.random.default_rng(seed)
    src, dst, n = _graph(rng)
    E, H, C = len(src), 3, 4
    xt, xs, v = (rng.normal(size=(n, H * C)) for _ in range(3))
    dist, we, att = rng.random(E), rng.normal(size=H * C), rng.normal(size=(H, C))
    g = rng.normal(size=(E, H))
    for name, args in [
        ("scatter_add", (g, dst, n)),
        ("segment_softmax", (g, dst, n)),
        ("gatv2_scores", (xt, xs, dist, we, att, src, dst, 0.2)),
        ("attend", (np.abs(g), v, src, dst, n)),
    ]:
        np.testing.assert_allclose(getattr(ck, name)(*args), getattr(_pykernels, name)(*args), rtol=1e-12, atol=1e-12)
    alpha = ck.segment_softmax(g, dst, n)
    np.testing.assert_allclose(
        ck.segment_softmax_backward(alpha, g, dst, n), _pykernels.segment_softmax_backward(alpha, g, dst, n), atol=1e-12
    )
    for a, b in zip(
        ck.gatv2_scores_backward(g, xt, xs, dist, we, att, src, dst, 0.2),
        _pykernels.gatv2_scores_backward(g, xt, xs, dist, we, att, src, dst, 0.2),
    ):
        np.testing.assert_allclose(a, b, rtol=1e-11, atol=1e-11)
    gv = rng.normal(size=(n, H * C))
    for a, b in zip(ck.attend_backward(gv, alpha, v, src, dst), _pykernels.attend_backward(gv, alpha, v, src, dst)):
        np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-12)


def test_set_sum_is_correctly_rounded_in_both_backends():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(7, 11, 5)) * 10.0 ** rng.integers(-8, 8, size=(7, 11, 5))
    a, b = ck.set_sum(x), _pykernels.set_sum(x)
    assert np.array_equal(a, b)
    perm = rng.permutation(11)
    assert np.array_equal(ck.set_sum(np.ascontiguousarray(x[:, perm])), a)


def test_use_backend_switches_and_restores():
    prev = kernels.use_backend("python")
    try:
        assert kernels.BACKEND == "python"
        with pytest.raises(ValueError):
            kernels.use_backend("fortran")
    finally:
        kernels.use_backend(prev)
    assert kernels.BACKEND == prev


def test_segment_softmax_large_scores_stable():
    s = np.array([[1000.0], [1001.0]])
    out = kernels.segment_softmax(s, np.array([0, 0]), 1)
    np.testing.assert_allclose(out[:, 0], [0.2689414, 0.7310586], atol=1e-4)
