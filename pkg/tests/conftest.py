import numpy as np
import pytest

from anchorsplat import diffcore as dc


@pytest.fixture(autouse=True)
def float64():
    """Tests run in double precision unless they opt out."""
    with dc.precision(np.float64):
        yield


def numeric_grad(f, x, eps=1e-6):
    """Central differences of a scalar function of one array, every coordinate."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gf = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        o = flat[i]
        flat[i] = o + eps
        fp = f(x)
        flat[i] = o - eps
        fm = f(x)
        flat[i] = o
        gf[i] = (fp - fm) / (2 * eps)
    return g


_ACCEPTANCE = {}


def record(n, ok, detail):
    _ACCEPTANCE[n] = (ok, detail)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        ok, detail = _ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'} - {detail}")
