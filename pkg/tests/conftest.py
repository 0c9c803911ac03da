import pytest

_RESULTS = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[_RESULTS] = {}


@pytest.fixture
def criterion(request):
    """``criterion(n, ok, detail)`` records one acceptance verdict for the end-of-run report."""
    store = request.config.stash[_RESULTS]

    def record(n, ok, detail=""):
        store[n] = (bool(ok), detail)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    store = config.stash[_RESULTS]
    if not store:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(store):
        ok, detail = store[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
