import pytest

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def report():
    """Record a one-line acceptance verdict; all lines are repeated in the terminal summary."""

    def _report(code: str, ok: bool, detail: str):
        line = f"{code} {'PASS' if ok else 'FAIL'}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return _report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
