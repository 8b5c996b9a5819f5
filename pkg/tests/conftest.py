import pytest

_LINES = pytest.StashKey[list]()


@pytest.fixture
def criterion(request):
    """record(number, name, ok, detail) prints one PASS/FAIL line and asserts ok."""
    lines = request.config.stash.setdefault(_LINES, [])

    def record(number, name, ok, detail=""):
        line = f"{'PASS' if ok else 'FAIL'}  [{number:>2}] {name}" + (f": {detail}" if detail else "")
        lines.append((number, line))
        print(line)
        assert ok, line
    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines, key=lambda x: x[0]):
            terminalreporter.write_line(line)
