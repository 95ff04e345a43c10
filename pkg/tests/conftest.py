import pytest

_LINES: dict[int, str] = {}


class CriterionRecorder:
    def __init__(self, number: int, title: str):
        self.number, self.title = number, title
        self.details: list[str] = []
        _LINES[number] = f"criterion {number:2d} FAIL  {title} (did not finish)"

    def note(self, text: str) -> None:
        self.details.append(text)

    def check(self, ok: bool, text: str) -> None:
        self.details.append(text)
        status = "PASS" if ok else "FAIL"
        _LINES[self.number] = f"criterion {self.number:2d} {status}  {self.title}: " + "; ".join(self.details)
        print(_LINES[self.number])
        assert ok, text


@pytest.fixture
def criterion(request):
    marker = request.node.get_closest_marker("criterion")
    return CriterionRecorder(*marker.args)


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


def pytest_terminal_summary(terminalreporter):
    if not _LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_LINES):
        terminalreporter.write_line(_LINES[n])
