"""Shared fixtures and the acceptance summary hook.

The acceptance tests record one line per criterion into
``ACCEPTANCE_LINES``; the terminal-summary hook prints them after the run
so the pass/fail ledger is visible even with output capture on.
"""

from __future__ import annotations

import numpy as np
import pytest

import synth

ACCEPTANCE_LINES = []


def record_criterion(number: int, passed: bool, detail: str) -> None:
    status = "PASS" if passed else "FAIL"
    ACCEPTANCE_LINES.append(f"[criterion {number:2d}] {status} - {detail}")


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def voronoi128():
    return synth.voronoi_image()


@pytest.fixture(scope="session")
def ellipse128():
    return synth.ellipse_image()


@pytest.fixture(scope="session")
def smooth128():
    return synth.smooth_image()


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
