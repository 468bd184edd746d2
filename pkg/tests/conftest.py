import pytest

_KEY = pytest.StashKey[dict]()
N_CRITERIA = 9


def pytest_configure(config):
    config.stash[_KEY] = {}


@pytest.fixture
def criterion(request):
    """``criterion(i, ok, detail)`` records a pass/fail line for the acceptance summary."""
    store = request.config.stash[_KEY]

    def record(i: int, ok: bool, detail: str = "") -> bool:
        store[i] = (bool(ok), detail)
        return bool(ok)

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    store = config.stash.get(_KEY, {})
    if not store:
        return
    terminalreporter.section("acceptance criteria")
    for i in range(1, N_CRITERIA + 1):
        if i in store:
            ok, detail = store[i]
            terminalreporter.write_line(f"criterion {i}: {'PASS' if ok else 'FAIL'}  {detail}")
        else:
            terminalreporter.write_line(f"criterion {i}: NOT RUN")
