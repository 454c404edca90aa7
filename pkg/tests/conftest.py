import time

import pytest

ACCEPTANCE: dict[int, tuple[str, bool, str]] = {}


class Criterion:
    def __init__(self, number: int, name: str, budget_s: float):
        self.number, self.name, self.budget_s = number, name, budget_s
        self.detail = ""

    def __enter__(self):
        self.t0 = time.perf_counter()
        ACCEPTANCE[self.number] = (self.name, False, "did not finish")
        return self

    def __exit__(self, exc_type, exc, tb):
        elapsed = time.perf_counter() - self.t0
        over = elapsed > self.budget_s
        ok = exc_type is None and not over
        note = self.detail
        if exc is not None:
            note = f"{note} {type(exc).__name__}: {str(exc).splitlines()[0] if str(exc) else ''}".strip()
        timing = f"{elapsed:.1f}s/{self.budget_s:g}s"
        ACCEPTANCE[self.number] = (self.name, ok, f"{note} [{timing}]".strip())
        if exc_type is None and over:
            raise AssertionError(f"criterion {self.number} took {elapsed:.1f}s, budget {self.budget_s}s")
        return False


@pytest.fixture
def criterion():
    return Criterion


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        name, ok, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:2d} {name}: {'PASS' if ok else 'FAIL'}  {detail}")
