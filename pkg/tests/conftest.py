import numpy as np
import pytest

import coupledgp  # noqa: F401  (enables float64 before any test builds arrays)

ACCEPTANCE_RESULTS: list = []


def central_diff(f, x, h=1e-5, order=2):
    """Central finite-difference gradient of scalar ``f`` at flat vector ``x``.

    ``order=4`` uses the five-point stencil, which tolerates a larger step
    and so loses less to rounding.
    """
    x = np.asarray(x, dtype=float)
    g = np.zeros_like(x)
    for i in range(x.size):
        step = h * max(1.0, abs(x[i]))

        def at(k):
            xk = x.copy()
            xk[i] += k * step
            return f(xk)

        if order == 2:
            g[i] = (at(1) - at(-1)) / (2 * step)
        else:
            g[i] = (8 * (at(1) - at(-1)) - (at(2) - at(-2))) / (12 * step)
    return g


def assert_grad_close(analytic, numeric, rtol, atol):
    analytic = np.asarray(analytic, dtype=float).ravel()
    numeric = np.asarray(numeric, dtype=float).ravel()
    err = np.abs(analytic - numeric)
    tol = np.maximum(rtol * np.abs(numeric), atol)
    bad = np.flatnonzero(err > tol)
    assert bad.size == 0, f"{bad.size} components off; worst {err[bad].max():.3g} at {bad[:5]}"


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in ACCEPTANCE_RESULTS:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
