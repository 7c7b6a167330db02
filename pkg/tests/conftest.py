import pytest

_CRITERIA = {}


@pytest.fixture
def criterion(request):
    """Record the measured values of an acceptance criterion for the summary table."""
    def record(number, detail):
        request.node.user_properties.append(("criterion", (number, detail)))
    return record


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.failed):
        return
    for key, value in report.user_properties:
        if key == "criterion":
            number, detail = value
            _CRITERIA[number] = ("PASS" if report.passed else "FAIL", detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        status, detail = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number}: {status}  {detail}")
