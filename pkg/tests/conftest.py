import pytest

_LINES: list[str] = []


@pytest.fixture
def report_criterion(capsys):
    """Print one PASS/FAIL line for an acceptance criterion and return the verdict."""

    def report(label: str, ok: bool, detail: str) -> bool:
        line = f"{'PASS' if ok else 'FAIL'} {label}: {detail}"
        _LINES.append(line)
        with capsys.disabled():
            print(f"\n{line}", flush=True)
        return ok

    return report


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in _LINES:
            terminalreporter.write_line(line)
