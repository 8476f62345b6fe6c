import sys
from pathlib import Path

import pytest

# helper modules (_gradcheck, _gradcases) live next to the tests
sys.path.insert(0, str(Path(__file__).parent))

_RESULTS: list[str] = []


class CriterionReport:
    """Collects named checks for one acceptance criterion and reports one line."""

    def __init__(self, number, title):
        self.number = number
        self.title = title
        self.checks: list[tuple[str, bool]] = []

    def check(self, label, ok):
        self.checks.append((label, bool(ok)))
        return bool(ok)

    @property
    def passed(self):
        return bool(self.checks) and all(ok for _, ok in self.checks)

    def line(self):
        status = "PASS" if self.passed else "FAIL"
        failed = [label for label, ok in self.checks if not ok]
        detail = "; ".join(label for label, _ in self.checks)
        if failed:
            detail = "failed: " + "; ".join(failed)
        return f"[{status}] criterion {self.number}: {self.title} ({detail})"


@pytest.fixture
def criterion(request):
    reports = []

    def make(number, title):
        rep = CriterionReport(number, title)
        reports.append(rep)
        return rep

    yield make
    for rep in reports:
        line = rep.line()
        _RESULTS.append(line)
        print(line)


def pytest_terminal_summary(terminalreporter):
    if _RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_RESULTS, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
