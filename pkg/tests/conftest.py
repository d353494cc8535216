import pytest

_LINES = {}


@pytest.fixture
def criterion():
    """Record one acceptance line: criterion(number, title, passed, detail)."""

    def record(n, title, passed, detail=""):
        line = f"[{'PASS' if passed else 'FAIL'}] criterion {n}: {title}"
        if detail:
            line += f" -- {detail}"
        _LINES.setdefault(n, []).append(line)
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not _LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_LINES):
        for line in _LINES[n]:
            terminalreporter.write_line(line)
