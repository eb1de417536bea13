import pytest

_LINES = []


@pytest.fixture(scope="session")
def report():
    """Record (and print) one PASS/FAIL line for an acceptance criterion."""

    def _report(number: int, ok: bool, detail: str) -> bool:
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        _LINES.append(line)
        print(line)
        return ok

    return _report


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_LINES):
            terminalreporter.write_line(line)
