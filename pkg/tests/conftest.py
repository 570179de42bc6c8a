import pytest

_LINES: dict[int, str] = {}


@pytest.fixture
def record():
    """record(n, name, passed, detail) stores one acceptance line, printed at session end."""

    def _record(n: int, name: str, passed: bool, detail: str) -> bool:
        _LINES[n] = f"criterion {n:2d} {name:24s} {'PASS' if passed else 'FAIL'}  {detail}"
        return passed

    return _record


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for n in sorted(_LINES):
            terminalreporter.write_line(_LINES[n])
