import sys
import numpy as np
import pytest

from gradsense.victim import init_model, parse_arch


def central_diff(f, x, rel_step=1e-5):
    """Central finite differences of scalar ``f`` at ``x`` with h = rel_step*(1+|x|)."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gf = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        h = rel_step * (1.0 + abs(flat[i]))
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        gf[i] = (fp - fm) / (2 * h)
    return g


def max_rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-300))


@pytest.fixture
def small_mlp():
    arch = parse_arch("mlp:h=6", (1, 4, 4), 3)
    return init_model(arch, 3)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(results):
        name, ok, detail = results[num]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} C{num:02d} {name}: {detail}")
