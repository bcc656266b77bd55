import pytest

_REPORT = []


@pytest.fixture
def report():
    """Record one pass/fail line for the acceptance summary."""

    def add(number, name, ok, detail):
        line = f"criterion {number} [{'PASS' if ok else 'FAIL'}] {name}: {detail}"
        print(line)
        _REPORT.append((number, line))
        return ok

    return add


def pytest_terminal_summary(terminalreporter):
    if _REPORT:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(_REPORT):
            terminalreporter.write_line(line)
