import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "survode", deadline=None, max_examples=40,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("survode")


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


class AcceptanceReport:
    """Collects one verdict line per acceptance criterion and echoes it live."""

    def __init__(self, config):
        self.config = config
        self.lines = {}

    def record(self, criterion: str, passed, detail: str) -> None:
        verdict = {True: "PASS", False: "FAIL", None: "SKIP"}[passed]
        line = f"{criterion} {verdict}: {detail}"
        self.lines[criterion] = line
        tr = self.config.pluginmanager.get_plugin("terminalreporter")
        if tr is not None:
            tr.write_line("")
            tr.write_line(line)


@pytest.fixture(scope="session")
def acceptance(request):
    report = getattr(request.config, "_acceptance_report", None)
    if report is None:
        report = request.config._acceptance_report = AcceptanceReport(request.config)
    return report


def pytest_terminal_summary(terminalreporter, config):
    report = getattr(config, "_acceptance_report", None)
    if report and report.lines:
        terminalreporter.section("acceptance criteria")
        for key in sorted(report.lines, key=lambda k: int(k[1:])):
            terminalreporter.write_line(report.lines[key])
