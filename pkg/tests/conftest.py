import numpy as np
import pytest

from earlyrank.world import WorldConfig, generate_world

# criterion number -> (title, [outcomes]); filled by the report hook below
_CRITERIA: dict[int, list] = {}
# free-form lines (measured values) printed after the criteria
_NOTES: list[str] = []


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion a test belongs to")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    number, title = mark.args
    entry = _CRITERIA.setdefault(number, [title, []])
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        entry[1].append("skipped" if rep.skipped else ("passed" if rep.passed else "failed"))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, outcomes = _CRITERIA[number]
        if "failed" in outcomes:
            verdict = "FAIL"
        elif outcomes and all(o == "passed" for o in outcomes):
            verdict = "PASS"
        else:
            verdict = "SKIP"
        terminalreporter.write_line(f"criterion {number:2d}: {verdict}  {title}")
    if _NOTES:
        terminalreporter.section("acceptance measurements")
        for line in _NOTES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def note():
    """Record a line for the end-of-run measurement section."""
    return _NOTES.append


TINY = WorldConfig(num_users=12, num_ads=20, num_campaigns=4, latent_dim=2, num_buckets=3,
                   seed=3)


@pytest.fixture(scope="session")
def tiny_world():
    return generate_world(TINY)


@pytest.fixture(scope="session")
def small_world():
    return generate_world(WorldConfig(num_users=200, num_ads=300, num_campaigns=10, seed=11))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
