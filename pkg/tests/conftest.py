import numpy as np
import pytest

from qlcontrol.geometry import ControlRegion, Grid, SpatialDomain
from qlcontrol.discretize import ScalarField, lq_norm
from qlcontrol.nonlinearity import cubic_model, linear_model, manufactured_forcing
from qlcontrol.solvers import TimeGrid
from qlcontrol.weights import CarlemanParameters, construct_psi
from qlcontrol.fixedpoint import ProblemGeometry


@pytest.fixture(scope="session")
def grid_1d():
    return Grid(SpatialDomain.interval(0.0, 1.0, 65))


@pytest.fixture(scope="session")
def grid_1d_fine():
    return Grid(SpatialDomain.interval(0.0, 1.0, 129))


@pytest.fixture(scope="session")
def region_1d(grid_1d):
    return ControlRegion.build(grid_1d, ((0.25, 0.75),), ((0.4, 0.6),))


@pytest.fixture(scope="session")
def psi_1d(grid_1d, region_1d):
    return construct_psi(grid_1d, region_1d)


@pytest.fixture(scope="session")
def geometry_1d(grid_1d, region_1d, psi_1d):
    return ProblemGeometry(grid_1d, region_1d, psi_1d, TimeGrid(1.0, 128))


@pytest.fixture(scope="session")
def params_desk(psi_1d):
    return CarlemanParameters(lam=0.5, s=0.01, horizon_T=1.0,
                              sup_norm=psi_1d.sup_norm)


def desk_problem(grid, model, amplitude=0.1, scale=1e-2):
    """Stationary sine state, manufactured forcing, unit-L2 sine bump."""
    x = grid.nodes[:, 0]
    ys = ScalarField(grid, amplitude * np.sin(np.pi * x))
    f = manufactured_forcing(model, ys, grid)
    bump = np.sin(np.pi * x)
    bump = bump / lq_norm(bump, 2, grid)
    y0 = ys.values + scale * bump
    return ys, f, y0


@pytest.fixture(scope="session")
def linear_desk(grid_1d):
    model = linear_model(1.0)
    ys, f, y0 = desk_problem(grid_1d, model)
    return model, ys, f, y0


@pytest.fixture(scope="session")
def cubic_desk(grid_1d):
    model = cubic_model(1.0)
    ys, f, y0 = desk_problem(grid_1d, model)
    return model, ys, f, y0
