import math

import numpy as np
import pytest

from mpdiff.tensor import Tensor


def numeric_grad(f, arrays, h=1e-6):
    """Central differences of scalar ``f()`` w.r.t. each array (modified in place)."""
    grads = []
    for a in arrays:
        g = np.zeros_like(a, dtype=np.float64)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = a[i]
            a[i] = old + h
            fp = f()
            a[i] = old - h
            fm = f()
            a[i] = old
            g[i] = (fp - fm) / (2 * h)
        grads.append(g)
    return grads


def rel_err(a, b):
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def check_op_grad(build, shapes, rng, h=1e-6, positive=False):
    """Analytic vs numeric gradient of ``sum(build(*xs) * w)`` for a fixed random ``w``."""
    arrays = [rng.standard_normal(s) for s in shapes]
    if positive:
        arrays = [np.abs(a) + 0.5 for a in arrays]
    tensors = [Tensor(a, requires_grad=True, dtype=np.float64) for a in arrays]
    out = build(*tensors)
    w = rng.standard_normal(out.shape)
    loss = (out * Tensor(w, dtype=np.float64)).sum()
    loss.backward()

    def f():
        return float(np.sum(build(*[Tensor(a, dtype=np.float64) for a in arrays]).data * w))

    num = numeric_grad(f, arrays, h)
    return max(rel_err(t.grad, n) for t, n in zip(tensors, num))


def golden_section(f, a, b, tol=1e-10):
    """Minimizer of a unimodal scalar ``f`` on ``[a, b]``."""
    phi = (math.sqrt(5) - 1) / 2
    c, d = b - phi * (b - a), a + phi * (b - a)
    while b - a > tol:
        if f(c) < f(d):
            b, d = d, c
            c = b - phi * (b - a)
        else:
            a, c = c, d
            d = a + phi * (b - a)
    return 0.5 * (a + b)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_CRITERIA = pytest.StashKey[dict]()


@pytest.fixture
def criterion(request):
    """``record(n, ok, detail)``: log an acceptance-criterion outcome for the summary."""
    store = request.config.stash.setdefault(_CRITERIA, {})

    def record(n: int, ok: bool, detail: str) -> bool:
        store.setdefault(n, []).append((bool(ok), detail))
        print(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
        return bool(ok)

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    store = config.stash.get(_CRITERIA, None)
    if not store:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(store):
        ok = all(o for o, _ in store[n])
        details = "; ".join(d for _, d in store[n])
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {details}")
