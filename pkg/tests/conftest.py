import numpy as np
import pytest


def fd_grad(f, x, coords=None, h=1e-4):
    """Central differences of scalar ``f`` at ``x`` (all coordinates, or ``coords``)."""
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1)
    coords = range(flat.size) if coords is None else coords
    out = {}
    for i in coords:
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        out[i] = (fp - fm) / (2 * h)
    return out


def rel_err(analytic, numeric, floor=1e-6):
    a, n = np.asarray(analytic, dtype=np.float64), np.asarray(numeric, dtype=np.float64)
    return np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(mod.LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
