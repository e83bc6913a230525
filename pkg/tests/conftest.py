import pytest

from promptevo import scores

# filled by tests/test_acceptance.py; echoed after the run so the per-criterion
# pass/fail lines survive pytest's output capture
ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(autouse=True)
def _reset_clamp_counter():
    scores.reset_clamp_count()
    yield


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
