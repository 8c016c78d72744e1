import numpy as np
import pytest

from qlcontrol.discretize import SpaceTimeField, lq_norm
from qlcontrol.errors import NonpositiveCoefficient
from qlcontrol.geometry import ControlRegion, Grid, SpatialDomain
from qlcontrol.nonlinearity import cubic_model, linear_model
from qlcontrol.solvers import (
    LayerOperators,
    TimeGrid,
    duality_defect,
    energy_audit,
    linear_adjoint,
    linear_forward,
    solve_adjoint,
    solve_linearized,
    solve_quasilinear_controlled,
    solve_uncontrolled,
    sup_distance,
)


def heat_mode_error(n_nodes, steps, T=0.1):
    grid = Grid(SpatialDomain.interval(0, 1, n_nodes))
    tg = TimeGrid(T, steps)
    model = linear_model(1.0)
    y0 = np.sin(np.pi * grid.nodes[:, 0])
    y0[grid.boundary_mask] = 0.0
    Y = solve_uncontrolled(model, y0, None, tg, grid)
    exact = np.exp(-np.pi ** 2 * T) * y0
    return np.abs(Y.values[-1] - exact).max() / np.abs(exact).max()


class TestUncontrolled:
    def test_stationary_fixed_point(self, grid_1d, cubic_desk):
        model, ys, f, _ = cubic_desk
        tg = TimeGrid(1.0, 32)
        Y = solve_uncontrolled(model, ys.values, f.values, tg, grid_1d)
        assert sup_distance(Y.values, np.tile(ys.values, (33, 1))) <= 1e-10

    def test_heat_mode(self):
        assert heat_mode_error(129, 512) <= 0.02

    def test_zero_data(self, grid_1d):
        model = cubic_model(1.0)
        tg = TimeGrid(1.0, 16)
        Y = solve_uncontrolled(model, np.zeros(grid_1d.n_nodes), None, tg,
                               grid_1d)
        assert np.abs(Y.values).max() == 0.0

    def test_temporal_order(self):
        # halving dt halves the terminal error, within 20%
        e1 = heat_mode_error(257, 32)
        e2 = heat_mode_error(257, 64)
        assert 1.6 <= e1 / e2 <= 2.4

    def test_max_principle(self, grid_1d):
        model = cubic_model(0.5)
        rng = np.random.default_rng(12)
        y0 = rng.uniform(-0.5, 1.0, grid_1d.n_nodes)
        y0[grid_1d.boundary_mask] = 0.0
        tg = TimeGrid(0.5, 32)
        Y = solve_uncontrolled(model, y0, None, tg, grid_1d)
        assert Y.values.max() <= y0.max() + 1e-12
        assert Y.values.min() >= y0.min() - 1e-12

    def test_max_principle_linear_solver(self, grid_1d):
        # implicit Euler with the M-matrix stencil preserves the data range
        rng = np.random.default_rng(13)
        tg = TimeGrid(0.5, 32)
        b = 0.5 + 1.5 * rng.random((tg.steps + 1, grid_1d.n_nodes))
        ops = LayerOperators.from_nodal_b(grid_1d, tg, b)
        y0 = rng.uniform(-1.0, 2.0, grid_1d.n_nodes)
        y0[grid_1d.boundary_mask] = 0.0
        y = linear_forward(ops, y0, None)
        assert y.max() <= y0.max() + 1e-12
        assert y.min() >= y0.min() - 1e-12


class TestLinearized:
    def test_stationary_consistency(self, grid_1d, cubic_desk):
        model, ys, f, _ = cubic_desk
        tg = TimeGrid(1.0, 32)
        z = solve_uncontrolled(model, ys.values, f.values, tg, grid_1d)
        y = solve_linearized(model, z, None, ys.values, f.values, tg)
        assert sup_distance(y.values, np.tile(ys.values, (33, 1))) <= 1e-12

    def test_linear_model_matches_uncontrolled(self, grid_1d, linear_desk):
        model, ys, f, y0 = linear_desk
        tg = TimeGrid(1.0, 64)
        Y = solve_uncontrolled(model, y0, f.values, tg, grid_1d)
        # z arbitrary: coefficient of a linear model is constant
        rng = np.random.default_rng(0)
        z_vals = rng.standard_normal((65, grid_1d.n_nodes))
        z = type(Y)(SpaceTimeField(grid_1d, tg.layer_times, z_vals))
        y = solve_linearized(model, z, None, y0, f.values, tg)
        assert sup_distance(y.values, Y.values) <= 1e-10

    def test_duhamel_indicator_source(self):
        # response to u = m * 1 vs a Duhamel superposition oracle: the
        # discrete mask's sine coefficients propagated analytically in time
        grid = Grid(SpatialDomain.interval(0, 1, 129))
        tg = TimeGrid(0.5, 256)
        model = linear_model(1.0)
        region = ControlRegion.build(grid, ((0.25, 0.75),), ((0.4, 0.6),))
        z = solve_uncontrolled(model, np.zeros(grid.n_nodes), None, tg, grid)
        u = np.ones((tg.steps + 1, grid.n_nodes))
        y = solve_linearized(model, z, u, np.zeros(grid.n_nodes), None, tg,
                             region=region)
        x = grid.nodes[:, 0]
        w = grid.trapezoid_weights
        exact = np.zeros_like(x)
        for j in range(1, 64):
            mode = np.sin(j * np.pi * x)
            mj = 2.0 * float(w @ (region.indicator * mode))
            lamj = (j * np.pi) ** 2
            exact += mj * (1.0 - np.exp(-lamj * tg.T)) / lamj * mode
        err = lq_norm(y.values[-1] - exact, 2, grid) / lq_norm(exact, 2, grid)
        assert err <= 0.01

    def test_coefficient_positivity_guard(self, grid_1d):
        tg = TimeGrid(1.0, 16)
        with pytest.raises(NonpositiveCoefficient):
            LayerOperators.from_nodal_b(
                grid_1d, tg, -np.ones(grid_1d.n_nodes))


class TestAdjoint:
    def test_zero_data(self, grid_1d):
        tg = TimeGrid(1.0, 16)
        p = solve_adjoint(np.ones(grid_1d.n_nodes), None,
                          np.zeros(grid_1d.n_nodes), tg, grid_1d)
        assert np.abs(p.values).max() == 0.0

    def test_reversed_heat_mode(self):
        grid = Grid(SpatialDomain.interval(0, 1, 129))
        T = 0.1
        tg = TimeGrid(T, 512)
        pT = np.sin(np.pi * grid.nodes[:, 0])
        pT[grid.boundary_mask] = 0.0
        p = solve_adjoint(np.ones(grid.n_nodes), None, pT, tg, grid)
        exact = np.exp(-np.pi ** 2 * T) * pT
        err = np.abs(p.values[0] - exact).max() / np.abs(exact).max()
        assert err <= 0.02

    def test_terminal_data_recorded(self, grid_1d):
        tg = TimeGrid(1.0, 16)
        pT = np.sin(np.pi * grid_1d.nodes[:, 0])
        pT[grid_1d.boundary_mask] = 0.0
        p = solve_adjoint(np.ones(grid_1d.n_nodes), None, pT, tg, grid_1d)
        assert np.array_equal(p.values[-1], pT)
        assert np.array_equal(p.terminal_data, pT)
        assert np.all(p.values[:, grid_1d.boundary_mask] == 0.0)


class TestDuality:
    @pytest.mark.parametrize("method", ["lu", "pcg"])
    def test_random_instances(self, method):
        grid = Grid(SpatialDomain.interval(0, 1, 16))
        tg = TimeGrid(1.0, 16)
        rng = np.random.default_rng(77)
        for _ in range(10):
            b = 0.5 + 1.5 * rng.random((tg.steps + 1, grid.n_nodes))
            ops = LayerOperators.from_nodal_b(grid, tg, b)

            def rnd():
                v = rng.standard_normal((tg.steps + 1, grid.n_nodes))
                v[:, grid.boundary_mask] = 0.0
                return v

            u, g = rnd(), rnd()
            y0, pT = rnd()[0], rnd()[0]
            y = linear_forward(ops, y0, u, method=method)
            p = linear_adjoint(ops, g, pT, method=method)
            assert abs(duality_defect(grid, tg, y, p, u, g)) <= 1e-11

    def test_2d_duality(self):
        grid = Grid(SpatialDomain.rectangle(nodes=(11, 9)))
        tg = TimeGrid(1.0, 16)
        rng = np.random.default_rng(5)
        b = 0.5 + rng.random((tg.steps + 1, grid.n_nodes))
        ops = LayerOperators.from_nodal_b(grid, tg, b)
        u = rng.standard_normal((tg.steps + 1, grid.n_nodes))
        g = rng.standard_normal((tg.steps + 1, grid.n_nodes))
        u[:, grid.boundary_mask] = 0.0
        g[:, grid.boundary_mask] = 0.0
        y0 = u[0].copy()
        pT = g[0].copy()
        y = linear_forward(ops, y0, u)
        p = linear_adjoint(ops, g, pT)
        assert abs(duality_defect(grid, tg, y, p, u, g)) <= 1e-11


class TestQuasilinearControlled:
    def test_zero_control_matches_uncontrolled(self, grid_1d, cubic_desk):
        model, ys, f, y0 = cubic_desk
        tg = TimeGrid(1.0, 32)
        region = ControlRegion.build(grid_1d, ((0.25, 0.75),), ((0.4, 0.6),))
        Y = solve_uncontrolled(model, y0, f.values, tg, grid_1d)
        yc = solve_quasilinear_controlled(
            model, np.zeros((tg.steps + 1, grid_1d.n_nodes)), y0, f.values,
            tg, grid_1d, region)
        assert np.array_equal(Y.values, yc.values)

    def test_linear_model_matches_linearized(self, grid_1d, linear_desk):
        model, ys, f, y0 = linear_desk
        tg = TimeGrid(1.0, 32)
        region = ControlRegion.build(grid_1d, ((0.25, 0.75),), ((0.4, 0.6),))
        rng = np.random.default_rng(3)
        u = rng.standard_normal((tg.steps + 1, grid_1d.n_nodes))
        z = solve_uncontrolled(model, y0, f.values, tg, grid_1d)
        y1 = solve_quasilinear_controlled(model, u, y0, f.values, tg, grid_1d,
                                          region)
        y2 = solve_linearized(model, z, u, y0, f.values, tg, region=region)
        assert sup_distance(y1.values, y2.values) <= 1e-10


class TestEnergy:
    def test_audit_zero_source(self, grid_1d):
        tg = TimeGrid(1.0, 32)
        rng = np.random.default_rng(21)
        b = 0.5 + 1.5 * rng.random((tg.steps + 1, grid_1d.n_nodes))
        ops = LayerOperators.from_nodal_b(grid_1d, tg, b)
        pT = rng.standard_normal(grid_1d.n_nodes)
        pT[grid_1d.boundary_mask] = 0.0
        p = linear_adjoint(ops, None, pT)
        assert energy_audit(ops, p, None, mu=0.5) >= -1e-12

    def test_audit_with_source(self, grid_1d):
        tg = TimeGrid(1.0, 32)
        rng = np.random.default_rng(22)
        b = 0.5 + 1.5 * rng.random((tg.steps + 1, grid_1d.n_nodes))
        ops = LayerOperators.from_nodal_b(grid_1d, tg, b)
        g = rng.standard_normal((tg.steps + 1, grid_1d.n_nodes))
        g[:, grid_1d.boundary_mask] = 0.0
        pT = rng.standard_normal(grid_1d.n_nodes)
        pT[grid_1d.boundary_mask] = 0.0
        p = linear_adjoint(ops, g, pT)
        assert energy_audit(ops, p, g, mu=0.5) >= -1e-12

    def test_audit_detects_corruption(self, grid_1d):
        # a trajectory that does not solve the adjoint recursion must fail
        tg = TimeGrid(1.0, 32)
        ops = LayerOperators.from_nodal_b(grid_1d, tg,
                                          np.ones(grid_1d.n_nodes))
        rng = np.random.default_rng(23)
        pT = rng.standard_normal(grid_1d.n_nodes)
        pT[grid_1d.boundary_mask] = 0.0
        p = linear_adjoint(ops, None, pT)
        bad = p.copy()
        bad[0] *= 10.0
        assert energy_audit(ops, bad, None, mu=1.0) < -1e-9
