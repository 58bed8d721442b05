import pytest

_CRITERIA = {}


@pytest.fixture
def criterion():
    """Record one pass/fail line per acceptance criterion, then assert it."""

    def report(number, ok, detail):
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'} | {detail}"
        _CRITERIA[number] = line
        print(line)
        assert ok, line

    return report


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for number in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[number])
