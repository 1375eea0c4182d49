from __future__ import annotations

import os

import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

settings.register_profile(
    "mcdm",
    deadline=None,
    max_examples=int(os.environ.get("MCDM_HYPOTHESIS_EXAMPLES", "30")),
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture],
)
settings.load_profile("mcdm")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(0)


# acceptance criteria report: one line per criterion, printed after the run


class _Acceptance:
    def __init__(self):
        self.lines: dict[int, str] = {}

    def record(self, number: int, passed: bool, detail: str) -> None:
        self.lines[number] = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"


_ACCEPTANCE = _Acceptance()


@pytest.fixture(scope="session")
def acceptance():
    return _ACCEPTANCE


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE.lines:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, 12):
        terminalreporter.write_line(_ACCEPTANCE.lines.get(n, f"criterion {n:2d}: NOT RUN"))
