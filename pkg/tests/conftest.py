import pytest

ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[n])


@pytest.fixture
def verdict(capsys):
    """Print one pass/fail line for a numbered criterion, then assert it."""
    def report(n: int, name: str, ok: bool, detail: str) -> None:
        line = f"criterion {n} {'PASS' if ok else 'FAIL'}: {name} ({detail})"
        ACCEPTANCE_LINES[n] = line
        with capsys.disabled():
            print("\n" + line)
        assert ok, line
    return report
