import random
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from q8s.fake_cluster import FakeCluster, LifecycleScript  # noqa: E402
from q8s.image import ImageBuilder, RecordingDriver  # noqa: E402
from q8s.orchestrator import ExecutionOptions, Orchestrator  # noqa: E402

FIXTURES = Path(__file__).parent / "fixtures"
GOLDEN = Path(__file__).parent / "golden"


@pytest.fixture
def fixtures():
    return FIXTURES


@pytest.fixture
def golden():
    return GOLDEN


@pytest.fixture
def make_cluster():
    started = []

    def factory(scripts=None, faults=(), **kwargs):
        if isinstance(scripts, LifecycleScript):
            scripts = {"*": scripts}
        cluster = FakeCluster(scripts, faults=faults, **kwargs).start()
        started.append(cluster)
        return cluster

    yield factory
    for c in started:
        c.stop()


@pytest.fixture
def driver():
    return RecordingDriver()


@pytest.fixture
def orchestrator(driver):
    return Orchestrator(ImageBuilder(driver), rng=random.Random(1234))


def fast_options(**overrides):
    values = dict(
        base_image="cuda-base:12",
        registry="registry.com/user",
        poll_interval=0.005,
        timeout=10.0,
        retry_backoff=0.001,
    )
    values.update(overrides)
    return ExecutionOptions(**values)


@pytest.fixture
def opts():
    return fast_options()


# acceptance reporting: one PASS/FAIL line per criterion at the end of the run

_criteria: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion a test belongs to")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    number, title = mark.args
    entry = _criteria.setdefault(number, {"title": title, "passed": 0, "failed": 0})
    if report.failed:
        entry["failed"] += 1
    elif report.when == "call" and report.passed:
        entry["passed"] += 1


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        e = _criteria[number]
        verdict = "PASS" if e["failed"] == 0 and e["passed"] > 0 else "FAIL"
        terminalreporter.write_line(
            f"{verdict}  criterion {number}: {e['title']} ({e['passed']} passed, {e['failed']} failed)"
        )
