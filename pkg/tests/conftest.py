import sys
import time
from contextlib import contextmanager
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

_RESULTS: list[str] = []


class _Criterion:
    def __init__(self, number: int, title: str):
        self.number = number
        self.title = title
        self.details: list[str] = []

    def note(self, text: str):
        self.details.append(text)


@pytest.fixture
def criterion(capsys):
    """Context manager that prints and records one PASS/FAIL line per acceptance criterion."""

    @contextmanager
    def run(number: int, title: str):
        c = _Criterion(number, title)
        start = time.perf_counter()
        status, error = "PASS", None
        try:
            yield c
        except BaseException as err:
            status, error = "FAIL", err
            raise
        finally:
            elapsed = time.perf_counter() - start
            detail = "; ".join(c.details)
            if error is not None:
                detail = f"{detail}; {type(error).__name__}: {str(error).splitlines()[0] if str(error) else ''}".lstrip("; ")
            line = f"[{status}] criterion {number} {title} ({elapsed:.1f}s) {detail}".rstrip()
            _RESULTS.append(line)
            with capsys.disabled():
                print("\n" + line)

    return run


def pytest_terminal_summary(terminalreporter):
    if _RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in _RESULTS:
            terminalreporter.write_line(line)
