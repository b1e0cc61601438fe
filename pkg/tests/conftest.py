import numpy as np
import pytest

from gnnpp import tensor as T


def numeric_grad(f, arrays, h=1e-6):
    """Central differences of scalar ``f()`` with respect to each array (mutated in place)."""
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            old = a[idx]
            a[idx] = old + h
            fp = f()
            a[idx] = old - h
            fm = f()
            a[idx] = old
            g[idx] = (fp - fm) / (2 * h)
        grads.append(g)
    return grads


def rel_error(a, b):
    a, b = np.concatenate([x.ravel() for x in a]), np.concatenate([x.ravel() for x in b])
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12))


def check_gradients(loss_fn, params, h=1e-6):
    """Relative error between backprop and central differences for ``loss_fn() -> Tensor``."""
    for p in params:
        p.zero_grad()
    loss_fn().backward()
    analytic = [p.grad.copy() for p in params]
    numeric = numeric_grad(lambda: float(loss_fn().data), [p.data for p in params], h)
    return rel_error(analytic, numeric)


def weighted_sum(out, rng):
    """Random linear functional of a tensor, so every output entry gets a distinct weight."""
    w = rng.normal(size=out.shape)
    return T.tsum(T.mul(out, w))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE = {}


def record_criterion(number, ok, detail):
    """Store a one-line verdict for the terminal summary, then assert it."""
    ACCEPTANCE[number] = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
    assert ok, detail


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[key])
