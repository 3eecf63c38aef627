import os

for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import numpy as np  # noqa: E402
import pytest  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_ACCEPTANCE: list[tuple[str, bool, str]] = []


@pytest.fixture
def record():
    """Register one acceptance line; returns ``passed`` so the caller can assert on it."""

    def _record(criterion: str, passed: bool, detail: str) -> bool:
        _ACCEPTANCE.append((criterion, bool(passed), detail))
        print(f"[{'PASS' if passed else 'FAIL'}] {criterion}: {detail}")
        return passed

    return _record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for criterion, passed, detail in _ACCEPTANCE:
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {criterion}: {detail}")
