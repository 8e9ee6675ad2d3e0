import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from cinetransfer.harness.scenarios import gt_trajectory
from cinetransfer.scene import build_scene

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def scene_a():
    return build_scene("scene_a")


@pytest.fixture(scope="session")
def scene_b():
    return build_scene("scene_b")


@pytest.fixture(scope="session")
def gt_static():
    """Camera about 3 units in front of the actor, looking at its chest."""
    return gt_trajectory({"kind": "static", "frames": 2})[0]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: list = []


@pytest.fixture
def criterion():
    """Record one pass/fail line for an acceptance criterion, then assert it."""

    def record(number: int, title: str, passed: bool, detail: str):
        line = f"criterion {number} [{'PASS' if passed else 'FAIL'}] {title}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert passed, line

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
