"""Shared fixtures: a coarse velocity grid and its assembled collision operators."""

import numpy as np
import pytest

from kinetic_lab.collision import assemble_collision
from kinetic_lab.velocity_grid import build_grid

COARSE_RADIUS = 4.5
COARSE_POINTS = 9
CUTOFF_D = 0.1


@pytest.fixture(scope="session")
def grid():
    return build_grid(COARSE_RADIUS, COARSE_POINTS)


@pytest.fixture(scope="session")
def op(grid):
    return assemble_collision(grid, CUTOFF_D)


@pytest.fixture(scope="session")
def raw_op(grid):
    """Operator without the conservation correction."""
    return assemble_collision(grid, CUTOFF_D, conservative=False)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tau(op):
    """Gap estimate: 0.9 times the distance of the sixth eigenvalue of L from zero."""
    return -0.9 * float(np.sort(np.linalg.eigvalsh(op.L))[::-1][5])
