import numpy as np
import pytest

from tsdistill.ndgrad import Tape, Tensor


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def numeric_grad(f, arrays, h=1e-4, entries=None, rng=None):
    """Central differences of scalar ``f()`` w.r.t. each array (mutated in place).

    ``entries`` caps how many randomly chosen positions per array are probed.
    """
    out = []
    for arr in arrays:
        flat = arr.reshape(-1)
        idx = np.arange(flat.size)
        if entries is not None and flat.size > entries:
            idx = (rng or np.random.default_rng(0)).choice(flat.size, entries, replace=False)
        g = np.full(flat.size, np.nan)
        for i in idx:
            old = flat[i]
            flat[i] = old + h
            fp = f()
            flat[i] = old - h
            fm = f()
            flat[i] = old
            g[i] = (fp - fm) / (2 * h)
        out.append((g.reshape(arr.shape), idx))
    return out


def max_rel_error(analytic, numeric, idx, floor=1e-6):
    a = analytic.reshape(-1)[idx]
    n = numeric.reshape(-1)[idx]
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)))


def grad_check(build, tensors, h=1e-4, entries=None, rng=None):
    """Max relative error between tape gradients and central differences.

    ``build`` maps the list of tensors to a scalar Tensor.
    """
    for t in tensors:
        t.grad = None
    with Tape() as tape:
        loss = build(tensors)
    tape.backward(loss)
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]

    def f():
        return float(build(tensors).data)

    numeric = numeric_grad(f, [t.data for t in tensors], h, entries, rng)
    return max(max_rel_error(a, n, idx) for a, (n, idx) in zip(analytic, numeric))


def t64(arr, grad=True):
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=grad)


# --- acceptance reporting -------------------------------------------------------

_criteria = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    n = marker.args[0]
    if report.when == "call" or (report.when == "setup" and (report.skipped or report.failed)):
        status = "SKIP" if report.skipped else ("PASS" if report.passed else "FAIL")
        prev = _criteria.get(n)
        if prev is None or prev[0] == "PASS":
            _criteria[n] = (status, item.name)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        status, name = _criteria[n]
        terminalreporter.write_line(f"criterion {n}: {status} ({name})")
