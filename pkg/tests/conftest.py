import pytest

VERDICTS = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[VERDICTS] = []


@pytest.fixture
def verdict(request):
    """Record a one-line pass/fail result for the terminal summary, then assert it."""

    def record(number: int, name: str, ok: bool, detail: str):
        line = f"criterion {number} {name}: {'PASS' if ok else 'FAIL'} ({detail})"
        request.config.stash[VERDICTS].append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(VERDICTS, [])
    if lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
