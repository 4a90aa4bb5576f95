import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("svflow", max_examples=60, deadline=None)
settings.load_profile("svflow")


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


_acceptance = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(n, title): acceptance criterion n")


def pytest_runtest_makereport(item, call):
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    n, title = marker.args
    failed = call.excinfo is not None and not call.excinfo.errisinstance(pytest.skip.Exception)
    if call.when == "call" or failed:
        prev = _acceptance.get(n, (title, True))
        _acceptance[n] = (title, prev[1] and not failed)


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_acceptance):
        title, ok = _acceptance[n]
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {title}")
