"""Collects one pass/fail line per acceptance criterion and prints them after the run."""

from contextlib import contextmanager
from dataclasses import dataclass

import pytest

_RESULTS = pytest.StashKey[dict]()


@dataclass
class Criterion:
    number: int
    title: str
    ok: bool = False
    detail: str = ""

    def line(self) -> str:
        return f"criterion {self.number} {'PASS' if self.ok else 'FAIL'}  {self.title}: {self.detail}"


def pytest_configure(config):
    config.stash[_RESULTS] = {}


@pytest.fixture
def criterion(request):
    """Context manager yielding a Criterion whose outcome is reported in the summary."""
    results = request.config.stash[_RESULTS]

    @contextmanager
    def record(number, title):
        c = Criterion(number, title)
        try:
            yield c
        except BaseException as e:
            c.ok = False
            c.detail = (c.detail + "; " if c.detail else "") + f"error {type(e).__name__}: {e}"
            raise
        finally:
            results[number] = c

    return record


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash.get(_RESULTS, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        terminalreporter.write_line(results[n].line())
