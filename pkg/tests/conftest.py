import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

_VERDICTS = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_VERDICTS] = []


@pytest.fixture(scope="session")
def verdict(request):
    """Record one pass/fail line per acceptance criterion; returns the flag for asserting."""
    lines = request.config.stash[_VERDICTS]

    def record(criterion, ok, detail):
        line = f"[{'PASS' if ok else 'FAIL'}] {criterion}: {detail}"
        lines.append(line)
        print(line, flush=True)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_VERDICTS, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
