import numpy as np
import pytest
from threadpoolctl import threadpool_limits

from descmine.imaging import CorpusSpec, generate_synthetic_image

# tiny matrices dominate; a threaded BLAS only adds overhead
_limits = threadpool_limits(limits=1, user_api="blas")


@pytest.fixture(scope="session")
def small_corpus():
    return [(i, generate_synthetic_image(CorpusSpec(256, 256, 24), 100 + i)) for i in range(8)]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance reporting: one line per criterion at the end of the run


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
    detail = dict(item.user_properties).get("detail", "")
    line = f"criterion {number} {'PASS' if rep.passed else 'FAIL'}: {title}" + (f" ({detail})" if detail else "")
    item.config._acceptance_lines = getattr(item.config, "_acceptance_lines", []) + [(number, line)]


def pytest_terminal_summary(terminalreporter, config):
    lines = getattr(config, "_acceptance_lines", [])
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(lines):
        terminalreporter.write_line(line)
