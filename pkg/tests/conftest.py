import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("ci", deadline=None, max_examples=100)
settings.load_profile("ci")


def rel_error(a, b) -> float:
    a = np.asarray(a, np.float64)
    b = np.asarray(b, np.float64)
    denom = max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def numeric_grad(f, x: np.ndarray, h: float = 1e-3, indices=None) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. ``x`` (perturbed in place)."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in (range(flat.size) if indices is None else indices):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return g


def numeric_grad_smooth(f, x: np.ndarray, h: float = 1e-3, indices=None, kink_tol: float = 1e-3):
    """Central differences plus a flag for entries that straddle a kink.

    Central differences at h and h/2 agree to O(h^2) on smooth functions.
    Near a ReLU hinge or max-pool tie they disagree at O(1) relative scale,
    and the estimate is meaningless there.
    """
    g = np.zeros(x.size, dtype=np.float64)
    kink = np.zeros(x.size, dtype=bool)
    flat = x.reshape(-1)

    def central(i, step):
        old = flat[i]
        flat[i] = old + step
        fp = f()
        flat[i] = old - step
        fm = f()
        flat[i] = old
        return (fp - fm) / (2 * step)

    for i in (range(flat.size) if indices is None else indices):
        g[i] = central(i, h)
        half = central(i, h / 2)
        kink[i] = abs(g[i] - half) > kink_tol * max(abs(g[i]), 1e-2)
    return g.reshape(x.shape), kink.reshape(x.shape)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# -- acceptance reporting ---------------------------------------------------------

def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by a test")
    config._criteria = {}


def pytest_collection_modifyitems(config, items):
    for item in items:
        mark = item.get_closest_marker("criterion")
        if mark is not None:
            config._criteria[item.nodeid] = mark.args


def pytest_terminal_summary(terminalreporter, config):
    criteria = getattr(config, "_criteria", {})
    results = {}
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            if rep.nodeid not in criteria or not hasattr(rep, "when"):
                continue
            if rep.when == "call" or rep.failed:
                detail = dict(rep.user_properties).get("detail", "")
                prev = results.get(rep.nodeid)
                if prev is None or prev[0] == "PASS":
                    results[rep.nodeid] = ("PASS" if rep.passed else "FAIL", detail)
    if not results:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for nodeid, (status, detail) in sorted(results.items(), key=lambda kv: criteria[kv[0]][0]):
        number, title = criteria[nodeid]
        line = f"criterion {number:2d} {status}  {title}"
        terminalreporter.write_line(f"{line}  [{detail}]" if detail else line)
