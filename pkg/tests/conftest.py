from __future__ import annotations

import numpy as np
import pytest
import torch

from naviformer.core import NopInstance, Obstacle


@pytest.fixture(autouse=True)
def _default_dtype():
    prev = torch.get_default_dtype()
    yield
    torch.set_default_dtype(prev)


def open_instance(nodes, obstacles=(), budget_T=2.0, step_len=0.02) -> NopInstance:
    rewards = [0.0] + [1.0] * (len(nodes) - 2) + [0.0]
    return NopInstance(tuple(nodes), tuple(rewards), tuple(Obstacle(*o) for o in obstacles),
                       budget_T, step_len)


def straight_path(a, b, step):
    """Points every ``step`` along a->b, finishing exactly at b."""
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    d = float(np.linalg.norm(b - a))
    k = int(np.floor(d / step))
    pts = [tuple(a + (b - a) * (i * step / d)) for i in range(k + 1)] if d > 0 else [tuple(a)]
    if d > 0 and pts[-1] != tuple(b):
        pts.append(tuple(b))
    return pts


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
