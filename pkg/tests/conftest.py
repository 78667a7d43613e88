import pytest

_RESULTS_KEY = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[_RESULTS_KEY] = {}


@pytest.fixture
def record(request):
    """record(n, title, passed, detail, block="") files one acceptance line and returns ``passed``."""
    results = request.config.stash[_RESULTS_KEY]

    def _record(n: int, title: str, passed: bool, detail: str, block: str = "") -> bool:
        prev = results.get(n)
        if prev is not None:
            title = f"{prev[0]}; {title}"
            detail = f"{prev[2]}; {detail}"
            block = "\n".join(b for b in (prev[3], block) if b)
        ok = bool(passed) and (prev is None or prev[1])
        results[n] = (title, ok, detail, block)
        return bool(passed)

    return _record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash.get(_RESULTS_KEY, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        title, ok, detail, block = results[n]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {n:>2}. {title}: {detail}")
        for line in block.splitlines():
            terminalreporter.write_line(f"        {line}")
