import time

import pytest

_LINES_KEY = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_LINES_KEY] = []


class Criterion:
    """Times one acceptance criterion and records its pass/fail line."""

    def __init__(self, config, number, title, budget_s):
        self.config, self.number, self.title, self.budget_s = config, number, title, budget_s
        self.details: list[str] = []
        self.ok = True

    def check(self, ok: bool, detail: str) -> None:
        self.ok &= bool(ok)
        self.details.append(("" if ok else "FAILED ") + detail)

    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, exc_type, exc, tb):
        took = time.perf_counter() - self.t0
        if exc_type is not None:
            self.check(False, f"raised {exc_type.__name__}: {exc}")
        self.check(took <= self.budget_s, f"{took:.1f}s (budget {self.budget_s:.0f}s)")
        status = "PASS" if self.ok else "FAIL"
        line = f"criterion {self.number:>2} {status}  {self.title}: " + "; ".join(self.details)
        self.config.stash[_LINES_KEY].append(line)
        reporter = self.config.pluginmanager.get_plugin("terminalreporter")
        if reporter is not None:
            reporter.write_line("")
            reporter.write_line(line)
        if exc_type is None:
            assert self.ok, line
        return False


@pytest.fixture
def criterion(request):
    def make(number, title, budget_s):
        return Criterion(request.config, number, title, budget_s)
    return make


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_LINES_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda l: int(l.split()[1])):
            terminalreporter.write_line(line)
