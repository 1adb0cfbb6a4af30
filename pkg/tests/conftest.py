import pytest

RESULTS_KEY = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[RESULTS_KEY] = {}


@pytest.fixture
def criterion(request):
    """Record one acceptance line: criterion(number, passed, detail)."""
    results = request.config.stash[RESULTS_KEY]

    def record(number: int, passed: bool, detail: str) -> bool:
        results[number] = (bool(passed), detail)
        return passed

    return record


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash.get(RESULTS_KEY, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        passed, detail = results[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")
