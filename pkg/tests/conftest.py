import pytest

_LINES: dict[int, str] = {}


class Verdict:
    """Records one pass/fail line per acceptance criterion."""

    def __call__(self, number: int, ok: bool, detail: str) -> bool:
        _LINES[number] = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        return ok


@pytest.fixture
def verdict():
    return Verdict()


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for number in sorted(_LINES):
            terminalreporter.write_line(_LINES[number])
