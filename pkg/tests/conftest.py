import time
from contextlib import contextmanager

import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", deadline=None)
settings.load_profile("default")

_ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for line in _ACCEPTANCE:
        terminalreporter.write_line(line)


@pytest.fixture
def acceptance():
    """Context manager that records one PASS/FAIL line per criterion.

    The block fails when it raises or when it exceeds ``limit_s`` seconds.
    """

    @contextmanager
    def criterion(number, title, limit_s):
        t0 = time.perf_counter()
        try:
            yield
        except BaseException as exc:
            elapsed = time.perf_counter() - t0
            _ACCEPTANCE.append(f"[{number:2d}] FAIL  {title} ({elapsed:.1f}s): {type(exc).__name__}: {exc}")
            raise
        elapsed = time.perf_counter() - t0
        ok = elapsed < limit_s
        _ACCEPTANCE.append(
            f"[{number:2d}] {'PASS' if ok else 'FAIL'}  {title} ({elapsed:.1f}s, limit {limit_s}s)"
        )
        assert ok, f"criterion {number} took {elapsed:.1f}s > {limit_s}s"

    return criterion


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
