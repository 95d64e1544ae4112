import pytest

_RESULTS = pytest.StashKey[dict]()
NUM_CRITERIA = 10


@pytest.fixture
def criterion(request):
    """record(k, ok, detail) stores the pass/fail line for acceptance criterion k."""
    store = request.config.stash.setdefault(_RESULTS, {})

    def record(k: int, ok: bool, detail: str) -> bool:
        store[k] = f"criterion {k:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(store[k])
        return ok

    return record


def pytest_terminal_summary(terminalreporter, config):
    store = config.stash.get(_RESULTS, None)
    if store is None:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for k in range(1, NUM_CRITERIA + 1):
        terminalreporter.write_line(store.get(k, f"criterion {k:>2}: NOT RUN"))
