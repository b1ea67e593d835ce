import pytest

CRITERIA: dict[int, tuple[str, bool, str]] = {}


class CriterionRecorder:
    def __init__(self, number: int, title: str):
        self.number, self.title, self.detail = number, title, ""

    def note(self, text: str) -> None:
        self.detail = f"{self.detail}; {text}" if self.detail else text


@pytest.fixture
def criterion(request):
    """Records the outcome of one acceptance criterion for the summary."""
    marker = request.node.get_closest_marker("criterion")
    rec = CriterionRecorder(*marker.args)
    yield rec
    failed = getattr(request.node, "call_failed", True)
    CRITERIA[rec.number] = (rec.title, not failed, rec.detail)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    if report.when == "call":
        item.call_failed = report.failed


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        title, ok, detail = CRITERIA[n]
        terminalreporter.write_line(f"criterion {n} {'PASS' if ok else 'FAIL'} {title}" + (f" ({detail})" if detail else ""))
