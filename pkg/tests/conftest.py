import pytest

ACCEPTANCE_RESULTS = {}


@pytest.fixture
def report():
    """Record one acceptance verdict: ``report(number, title, passed, detail)``."""

    def record(number, title, passed, detail):
        ACCEPTANCE_RESULTS[number] = (title, bool(passed), detail)
        print(f"criterion {number} [{'PASS' if passed else 'FAIL'}] {title}: {detail}")

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_RESULTS):
        title, passed, detail = ACCEPTANCE_RESULTS[number]
        terminalreporter.write_line(f"{number:>2}. {'PASS' if passed else 'FAIL'}  {title}: {detail}")
