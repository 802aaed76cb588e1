import numpy as np
import pytest

from gatelab.models import ModelKind

ALL_KINDS = [ModelKind.plain(), ModelKind.leaky(0.5), ModelKind.scalar_gate(), ModelKind.multi_gate()]


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def kind_id(kind):
    return kind.name


# Acceptance lines are collected here and printed after the run.
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
