"""Collects one verdict line per acceptance criterion and prints them after the run."""
import pytest

_VERDICTS: dict = {}


class Verdict:
    def __init__(self, number: int, title: str):
        self.number, self.title = number, title

    def record(self, ok: bool, detail: str) -> None:
        line = f"criterion {self.number} [{'PASS' if ok else 'FAIL'}] {self.title}: {detail}"
        _VERDICTS[self.number] = line
        print(line)
        assert ok, line


@pytest.fixture
def verdict(request):
    marker = request.node.get_closest_marker("criterion")
    return Verdict(*marker.args)


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by the test")


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(_VERDICTS):
        terminalreporter.write_line(_VERDICTS[k])
