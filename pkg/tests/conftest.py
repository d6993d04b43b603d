import numpy as np
import pytest

from snmmplan.experiments import exp_a_field, exp_a_ground_truth
from snmmplan.geometry import SkewField, Workspace, build_grid


@pytest.fixture(scope="session")
def free_grid():
    return build_grid(Workspace(), 0.1)


@pytest.fixture(scope="session")
def exp_a_grid():
    return build_grid(field=exp_a_field())


@pytest.fixture(scope="session")
def truth():
    return exp_a_ground_truth()


@pytest.fixture(scope="session")
def half_plane_grid():
    """Everything below y = 10 is occupied."""
    from snmmplan.geometry import ConvexPolygon

    field = SkewField(Workspace(), (ConvexPolygon.rectangle(-1.0, 21.0, -1.0, 10.0),))
    return build_grid(field=field)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    from tests._report import LINES

    if LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
