import pytest

_LINES = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_LINES] = []


@pytest.fixture
def criterion(request):
    """Record one PASS/FAIL line for an acceptance criterion; returns the verdict."""
    def report(number: int, title: str, ok: bool, detail: str = "") -> bool:
        line = f"[{number}] {'PASS' if ok else 'FAIL'}  {title}" + (f"  ({detail})" if detail else "")
        request.config.stash[_LINES].append((number, line))
        print(line)
        return ok

    return report


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
