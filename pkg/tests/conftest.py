import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

_VERDICTS = pytest.StashKey[dict]()


@pytest.fixture
def verdict(request):
    """Record ``(criterion, passed, detail)`` for the end-of-run summary."""
    store = request.config.stash.setdefault(_VERDICTS, {})

    def record(n, passed, detail):
        store[n] = (bool(passed), detail)
        return passed

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    store = config.stash.get(_VERDICTS, {})
    if not store:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(store):
        ok, detail = store[n]
        terminalreporter.write_line(f"[criterion {n}] {'PASS' if ok else 'FAIL'} {detail}")
