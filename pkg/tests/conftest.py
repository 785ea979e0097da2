import pytest

ACCEPTANCE = {}


@pytest.fixture
def acceptance():
    """Record one criterion outcome; the summary prints at the end of the session."""

    def record(number, title, passed, detail):
        ACCEPTANCE[number] = (title, bool(passed), detail)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        title, passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"AC{number:<2d} {'PASS' if passed else 'FAIL'}  {title}: {detail}")
