import numpy as np
import pytest

from prune_forge.tensor import SeededRng


@pytest.fixture
def rng():
    return SeededRng(20171005)


def finite_difference(loss, arr, h=1e-5):
    """Central differences of scalar ``loss()`` w.r.t. every entry of ``arr`` (in place)."""
    grad = np.zeros_like(arr)
    for idx in np.ndindex(arr.shape):
        orig = arr[idx]
        arr[idx] = orig + h
        up = loss()
        arr[idx] = orig - h
        down = loss()
        arr[idx] = orig
        grad[idx] = (up - down) / (2 * h)
    return grad


def max_rel_error(analytic, numeric, floor=1e-8):
    """Largest |a-n|/max(|a|,|n|) over entries where |analytic| > floor."""
    sel = np.abs(analytic) > floor
    if not sel.any():
        return 0.0
    a, n = analytic[sel], numeric[sel]
    return float(np.max(np.abs(a - n) / np.maximum(np.abs(a), np.abs(n))))


# --- acceptance criteria reporting ----------------------------------------

_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): numbered acceptance criterion")
    config.addinivalue_line("markers", "slow: long-running experiment")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    entry = _CRITERIA.setdefault(number, {"title": title, "ok": True, "seen": False, "seconds": 0.0})
    if report.when == "call" or (report.when == "setup" and not report.passed):
        entry["seen"] = True
        entry["seconds"] += report.duration
        if not report.passed:
            entry["ok"] = False


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        e = _CRITERIA[number]
        status = ("PASS" if e["ok"] else "FAIL") if e["seen"] else "NOT RUN"
        terminalreporter.write_line(
            f"criterion {number:>2}: {status:<7} {e['title']} ({e['seconds']:.1f} s)"
        )
