import pytest

_CRITERIA: list[str] = []


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running training experiments")


@pytest.fixture
def criterion(capsys):
    """Print one PASS/FAIL line for an acceptance criterion and remember it for the summary."""
    def record(number: int, ok: bool, detail: str, rows: str = "") -> bool:
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        _CRITERIA.append(line)
        with capsys.disabled():
            print("\n" + line)
            if rows:
                print(rows.rstrip("\n"))
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_CRITERIA):
            terminalreporter.write_line(line)
