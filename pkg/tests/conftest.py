import numpy as np
import pytest

from hydrokin.vgrid import VelocityGrid
from hydrokin.collision import CollisionTables


@pytest.fixture(scope="session")
def tables16():
    """Production-size dense tables; built once per test run (~1 min)."""
    grid = VelocityGrid(16, 6.0, kind="uniform")
    return CollisionTables(grid)


@pytest.fixture(scope="session")
def tables12():
    """Matrix-free tables for the quadrature-route collision checks."""
    grid = VelocityGrid(12, 6.0, kind="uniform")
    return CollisionTables(grid, build_matrices=False)


@pytest.fixture()
def rng():
    return np.random.default_rng(20260816)
