from __future__ import annotations

import pytest

from restmeta.specmodel import bundled_spec_path, load_spec
from restmeta.testbed import FaultProfile, start_testbed


@pytest.fixture(scope="session")
def petstore():
    return load_spec(bundled_spec_path("petstore"))


@pytest.fixture(scope="session")
def usermanagement():
    return load_spec(bundled_spec_path("usermanagement"))


@pytest.fixture(scope="module")
def testbed():
    handle = start_testbed(FaultProfile())
    yield handle
    handle.shutdown()


@pytest.fixture
def clean_testbed(testbed):
    testbed.reset()
    return testbed


@pytest.fixture
def faulty_testbed():
    """Factory: start a testbed with the given fault flags; all are shut down afterwards."""
    handles = []

    def start(*flags, **kwargs):
        handle = start_testbed(FaultProfile.only(*flags, **kwargs))
        handles.append(handle)
        return handle

    yield start
    for h in handles:
        h.shutdown()


# -- acceptance criterion reporting ----------------------------------------------

_criteria: dict[int, tuple[str, bool]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or not (rep.when == "call" or rep.failed):
        return
    number, title = mark.args
    _, ok = _criteria.get(number, (title, True))
    _criteria[number] = (title, ok and rep.passed)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        title, ok = _criteria[number]
        terminalreporter.write_line(f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {title}")
