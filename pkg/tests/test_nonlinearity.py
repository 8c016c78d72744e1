import numpy as np
import pytest

from qlcontrol.discretize import ScalarField, laplacian, lq_norm
from qlcontrol.errors import IntervalOutsideRange
from qlcontrol.geometry import Grid, SpatialDomain
from qlcontrol.nonlinearity import (
    cubic_model,
    globalize,
    invert_a,
    linear_model,
    manufactured_forcing,
    model_from_config,
    porous_medium_model,
    solve_stationary,
)


ALL_MODELS = [
    linear_model(2.0),
    cubic_model(1.0),
    porous_medium_model(m=2.0, eps=0.1),
]


@pytest.mark.parametrize("model", ALL_MODELS, ids=lambda m: m.name)
class TestCatalog:
    def test_zero_at_zero(self, model):
        assert model.a(0.0) == 0.0

    def test_slope_bounds_certified(self, model):
        lo, hi = model.valid_range
        ys = np.linspace(lo, hi, 1500)
        slopes = model.da(ys)
        assert slopes.min() > 0.0
        assert model.mu <= slopes.min() + 1e-12
        assert model.M_bound >= slopes.max() - 1e-12

    def test_derivative_consistency(self, model):
        lo, hi = model.valid_range
        # keep away from the edge so central differences stay in range
        ys = np.linspace(lo + 0.01, hi - 0.01, 1000)
        h = 1e-6
        fd = (model.a(ys + h) - model.a(ys - h)) / (2 * h)
        rel = np.abs(fd - model.da(ys)) / (1.0 + np.abs(model.da(ys)))
        assert rel.max() <= 1e-6
        h2 = 1e-5
        fd2 = (model.da(ys + h2) - model.da(ys - h2)) / (2 * h2)
        rel2 = np.abs(fd2 - model.dda(ys)) / (1.0 + np.abs(model.dda(ys)))
        assert rel2.max() <= 1e-4


def test_model_from_config():
    m = model_from_config("cubic", beta=0.5)
    assert m.a(1.0) == 1.5
    with pytest.raises(KeyError):
        model_from_config("nope")


class TestGlobalize:
    def test_linear_fixed_point(self):
        model = linear_model(1.5)
        g = globalize(model, (-1.0, 1.0))
        ys = np.linspace(-40.0, 40.0, 801)
        assert np.allclose(g.a(ys), model.a(ys), rtol=0, atol=1e-12)
        assert np.allclose(g.da(ys), 1.5, rtol=0, atol=1e-12)

    def test_agreement_on_interval_same_path(self):
        model = cubic_model(1.0)
        g = globalize(model, (-1.0, 1.0))
        assert g.a(0.5) == 0.625
        ys = np.linspace(-1.0, 1.0, 101)
        assert np.array_equal(g.a(ys), model.a(ys))
        assert np.array_equal(g.da(ys), model.da(ys))
        assert np.array_equal(g.dda(ys), model.dda(ys))

    def test_global_slope_bounds(self):
        model = cubic_model(1.0)
        g = globalize(model, (-1.0, 1.0))
        ys = np.linspace(-50.0, 50.0, 4001)
        slopes = g.da(ys)
        assert slopes.min() > 0.0          # mu_A > 0
        assert slopes.min() >= g.mu - 1e-12
        # slope at 10 sits between mu_A and the max over the enlarged interval
        assert g.mu <= float(g.da(10.0)) <= g.M_bound + 1e-12
        # second derivative vanishes outside the cutoff support
        assert np.all(g.dda(np.array([-49.0, 49.0])) == 0.0)

    def test_derivative_consistency_through_transition(self):
        model = cubic_model(1.0)
        g = globalize(model, (-1.0, 1.0))
        ys = np.linspace(-1.5, 1.5, 2000)  # spans both transition zones
        h = 1e-6
        fd = (g.a(ys + h) - g.a(ys - h)) / (2 * h)
        rel = np.abs(fd - g.da(ys)) / (1.0 + np.abs(g.da(ys)))
        assert rel.max() <= 1e-6
        h2 = 1e-5
        fd2 = (g.da(ys + h2) - g.da(ys - h2)) / (2 * h2)
        rel2 = np.abs(fd2 - g.dda(ys)) / (1.0 + np.abs(g.dda(ys)))
        assert rel2.max() <= 1e-4

    def test_interval_outside_range(self):
        model = cubic_model(1.0, valid_range=(-2.0, 2.0))
        with pytest.raises(IntervalOutsideRange):
            globalize(model, (-3.0, 1.0))


class TestStationary:
    def test_linear_manufactured_analytic(self):
        grid = Grid(SpatialDomain.interval(0, 1, 129))
        model = linear_model(1.0)
        x = grid.nodes[:, 0]
        f = np.pi ** 2 * np.sin(np.pi * x)
        state = solve_stationary(model, f, grid)
        assert np.abs(state.y_s.values - np.sin(np.pi * x)).max() <= 1e-3

    def test_cubic_round_trip(self, grid_1d):
        model = cubic_model(1.0)
        ys = ScalarField.from_function(grid_1d,
                                       lambda x: 0.1 * np.sin(np.pi * x))
        f = manufactured_forcing(model, ys, grid_1d)
        state = solve_stationary(model, f, grid_1d)
        assert np.abs(state.y_s.values - ys.values).max() <= 1e-10
        assert state.residual_norm <= 1e-8

    def test_zero_forcing(self, grid_1d):
        model = cubic_model(1.0)
        state = solve_stationary(model, np.zeros(grid_1d.n_nodes), grid_1d)
        assert np.abs(state.y_s.values).max() == 0.0

    def test_boundary_values(self, grid_1d):
        model = porous_medium_model(2.0, 0.2)
        ys = ScalarField.from_function(grid_1d,
                                       lambda x: 0.2 * np.sin(np.pi * x))
        f = manufactured_forcing(model, ys, grid_1d)
        state = solve_stationary(model, f, grid_1d)
        assert np.all(state.y_s.values[grid_1d.boundary_mask] == 0.0)


class TestManufacturedForcing:
    def test_zero_state(self, grid_1d):
        model = cubic_model(1.0)
        f = manufactured_forcing(model, np.zeros(grid_1d.n_nodes), grid_1d)
        assert np.abs(f.values).max() == 0.0

    def test_linear_taylor_bound(self):
        grid = Grid(SpatialDomain.interval(0, 1, 64))
        h = grid.spacing[0]
        model = linear_model(1.0)
        x = grid.nodes[:, 0]
        ys = np.sin(np.pi * x)
        ys[grid.boundary_mask] = 0.0
        f = manufactured_forcing(model, ys, grid)
        dev = np.abs(f.values - np.pi ** 2 * ys)
        dev[grid.boundary_mask] = 0.0
        assert dev.max() <= 1.05 * np.pi ** 4 * h ** 2 / 12.0

    def test_round_trip_with_solver(self, grid_1d):
        # manufactured forcing guarantees exact discrete stationarity
        model = cubic_model(1.0)
        ys = ScalarField.from_function(grid_1d,
                                       lambda x: 0.1 * np.sin(np.pi * x))
        f = manufactured_forcing(model, ys, grid_1d)
        residual = laplacian(grid_1d).apply_full(model.a(ys.values)) + f.values
        residual[grid_1d.boundary_mask] = 0.0
        assert lq_norm(residual, 2, grid_1d) <= 1e-12


def test_invert_a_monotone_robust():
    model = porous_medium_model(3.0, 0.05, valid_range=(-20.0, 20.0))
    rng = np.random.default_rng(8)
    y_true = rng.uniform(-10, 10, size=200)
    w = model.a(y_true)
    y = invert_a(model, w)
    assert np.abs(y - y_true).max() <= 1e-10
