import numpy as np
import pytest

from lfmkit.optics.config import OpticalConfig
from lfmkit.optics.psf import build_psf_stack

_criteria = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion covered by this test")


def pytest_runtest_logreport(report):
    crit = getattr(report, "criterion", None)
    if crit is None:
        return
    if report.when == "call" or report.outcome in ("failed", "skipped"):
        n, title = crit
        prev = _criteria.get(n, (title, "PASS"))[1]
        if report.outcome == "failed" or (report.outcome == "skipped" and not hasattr(report, "wasxfail")):
            status = "FAIL" if report.outcome == "failed" else "SKIP"
        else:
            status = "PASS"
        if prev != "PASS":
            status = prev
        _criteria[n] = (title, status)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    m = item.get_closest_marker("criterion")
    if m is not None:
        rep.criterion = tuple(m.args)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        title, status = _criteria[n]
        terminalreporter.write_line(f"criterion {n:2d} {status}  {title}")


@pytest.fixture(scope="session")
def small_cfg():
    return OpticalConfig(pixels_per_lenslet=7)


@pytest.fixture(scope="session")
def small_psfs(small_cfg):
    """Invariant and periodic kernels on 3 depths, A = 7."""
    return build_psf_stack(small_cfg, (-4.0, 0.0, 4.0), n_classes=7, size=40_000, seed=1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
