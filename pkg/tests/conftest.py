import numpy as np
import pytest

from pdrlab.pipeline import simulate_segment
from pdrlab.simkit import SensorNoiseSpec, activity_profile


@pytest.fixture(scope="session")
def walk_segment():
    return simulate_segment(activity_profile("walking", 30.0), SensorNoiseSpec(), seed=3)


@pytest.fixture(scope="session")
def random_segment():
    return simulate_segment(activity_profile("random", 30.0), SensorNoiseSpec(), seed=4)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_ACCEPTANCE_LINES = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title): numbered acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None or rep.skipped or not (rep.when == "call" or rep.failed):
        return
    number, title = marker.args
    detail = dict(item.user_properties).get("detail", "")
    verdict = "PASS" if rep.passed else "FAIL"
    _ACCEPTANCE_LINES[number] = f"{verdict}  criterion {number:2d}  {title}" + (f"  ({detail})" if detail else "")


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE_LINES):
        terminalreporter.write_line(_ACCEPTANCE_LINES[number])
