import pytest

_VERDICTS: list[str] = []


@pytest.fixture
def verdict():
    """``verdict(n, ok, detail)`` prints and records one PASS/FAIL line, returns ``ok``."""

    def record(number: int, ok: bool, detail: str) -> bool:
        line = f"CRITERION {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(line)
        _VERDICTS.append(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_VERDICTS):
            terminalreporter.write_line(line)
