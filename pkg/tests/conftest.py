import numpy as np
import pytest

from nsum.survey import ArdSurvey


def make_survey(y, known, columns=None, N=1000, **kw):
    y = np.asarray(y)
    cols = columns or [f"c{j}" for j in range(y.shape[1])]
    return ArdSurvey(responses=y, columns=cols, population_total=N, known_sizes=known, **kw)


@pytest.fixture
def fixture_survey():
    """Two respondents, known sizes (100, 100), N = 1000; PIMLE degrees (100, 200)."""
    return make_survey([[10, 10, 3], [20, 20, 6]], {"a": 100, "b": 100}, ["a", "b", "u"])


# -- acceptance summary ------------------------------------------------------

_CRITERIA: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion check")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when == "teardown":
        return
    number, title = marker.args
    entry = _CRITERIA.setdefault(number, {"title": title, "passed": True, "details": []})
    if report.failed:
        entry["passed"] = False
    if report.when == "call":
        entry["details"] += [str(v) for k, v in item.user_properties if k == "detail"]


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        entry = _CRITERIA[number]
        status = "PASS" if entry["passed"] else "FAIL"
        detail = "; ".join(entry["details"])
        line = f"[{status}] criterion {number}: {entry['title']}"
        terminalreporter.write_line(f"{line} ({detail})" if detail else line)
