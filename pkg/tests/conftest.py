from __future__ import annotations

import pytest

from fixcon.injector import make_desk_model

ACCEPTANCE: dict[int, tuple[str, str]] = {}


@pytest.fixture(scope="session")
def desk():
    """Seed-0 reference model with 200 synthetic images."""
    return make_desk_model(0)


@pytest.fixture(scope="session")
def small_desk():
    return make_desk_model(0, n_images=60)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    report = outcome.get_result()
    number, text = marker.args
    if report.when == "call" or (report.when == "setup" and report.failed):
        ACCEPTANCE[number] = ("PASS" if report.passed else "FAIL", text)


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, text): one of the numbered acceptance criteria")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        status, text = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number}: {status}  {text}")
