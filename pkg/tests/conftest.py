import time

import pytest

_RESULTS: dict[int, dict] = {}


class Criterion:
    """Per-test handle: notes a criterion's label, detail text and elapsed time."""

    def __init__(self, number: int, label: str, budget_s: float | None):
        self.number, self.label, self.budget_s = number, label, budget_s
        self.details: list[str] = []
        self.start = time.perf_counter()

    def note(self, text: str) -> None:
        self.details.append(text)

    def elapsed(self) -> float:
        return time.perf_counter() - self.start

    def check_budget(self) -> None:
        if self.budget_s is not None:
            assert self.elapsed() < self.budget_s, f"took {self.elapsed():.1f}s, budget {self.budget_s:g}s"


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    if report.when == "call":
        item.stash_outcome = report.outcome


@pytest.fixture
def criterion(request):
    handles = []

    def make(number: int, label: str, budget_s: float | None = None) -> Criterion:
        c = Criterion(number, label, budget_s)
        handles.append(c)
        return c

    yield make
    outcome = getattr(request.node, "stash_outcome", "failed")
    for c in handles:
        prev = _RESULTS.get(c.number)
        passed = outcome == "passed" and (prev is None or prev["passed"])
        _RESULTS[c.number] = {
            "label": c.label,
            "passed": passed,
            "detail": "; ".join(([prev["detail"]] if prev and prev["detail"] else []) + c.details),
            "elapsed": c.elapsed() + (prev["elapsed"] if prev else 0.0),
        }


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_RESULTS):
        r = _RESULTS[number]
        status = "PASS" if r["passed"] else "FAIL"
        terminalreporter.write_line(f"[{status}] criterion {number}: {r['label']} ({r['elapsed']:.1f}s) {r['detail']}")
