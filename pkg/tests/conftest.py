"""Shared test configuration.

The worker-thread ceiling must be raised before numba is first imported,
so this has to happen at conftest import time, ahead of any test module.
"""

import os

os.environ.setdefault("NUMBA_NUM_THREADS", str(max(8, os.cpu_count() or 1)))

_ACCEPTANCE_RESULTS = []


def record_criterion(number: int, ok: bool, detail: str) -> None:
    """Collect one acceptance-criterion verdict for the terminal summary."""
    _ACCEPTANCE_RESULTS.append((number, ok, detail))
    assert ok, f"acceptance criterion {number} failed: {detail}"


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number, ok, detail in sorted(_ACCEPTANCE_RESULTS):
        status = "PASS" if ok else "FAIL"
        terminalreporter.write_line(f"criterion {number:2d}: {status} - {detail}")
