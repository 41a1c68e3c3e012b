import numpy as np
import pytest


def central_fd(func, x, eps=1e-3):
    """Central finite differences of a scalar function over every entry of x."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        fp = func(x)
        flat[i] = old - eps
        fm = func(x)
        flat[i] = old
        g[i] = (fp - fm) / (2 * eps)
    return grad


def assert_close_rel(actual, expected, rtol, atol_frac=1e-6):
    """rtol relative to the largest expected magnitude (scale-aware)."""
    actual = np.asarray(actual)
    expected = np.asarray(expected)
    scale = max(np.abs(expected).max(), 1e-12)
    np.testing.assert_allclose(actual, expected, rtol=rtol, atol=max(rtol, atol_frac) * scale)


def offgrid(rng, n, lo, hi):
    """Random coordinates that stay away from integer grid lines."""
    c = rng.uniform(lo, hi, size=(n, 2))
    frac = c - np.floor(c)
    c = np.floor(c) + np.clip(frac, 0.05, 0.95)
    return c


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
