import pytest

_RESULTS = {}


class CriterionLog:
    def __init__(self, number: int, title: str):
        self.number = number
        self.title = title

    def report(self, passed: bool, detail: str) -> None:
        line = f"{'PASS' if passed else 'FAIL'} criterion {self.number:2d} {self.title}: {detail}"
        _RESULTS[self.number] = line
        print(line)


@pytest.fixture
def criterion(request):
    marker = request.node.get_closest_marker("criterion")
    return CriterionLog(*marker.args)


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


def pytest_terminal_summary(terminalreporter):
    if _RESULTS:
        terminalreporter.section("acceptance criteria")
        for k in sorted(_RESULTS):
            terminalreporter.write_line(_RESULTS[k])
