import numpy as np
import pytest

from qlcontrol.diagnostics import (
    carleman_check,
    fit_power_law,
    observability_check,
    smooth_random_field,
    smooth_random_spacetime,
    smoothing_scan,
    theorem_estimates,
)
from qlcontrol.errors import FitDegenerate
from qlcontrol.fixedpoint import ProblemGeometry, picard_run
from qlcontrol.geometry import ControlRegion, Grid, SpatialDomain
from qlcontrol.nonlinearity import linear_model, manufactured_forcing
from qlcontrol.solvers import TimeGrid
from qlcontrol.weights import CarlemanParameters, evaluate_weights


@pytest.fixture(scope="module")
def diag_setup(grid_1d, region_1d, psi_1d):
    tg = TimeGrid(0.5, 64)
    params = CarlemanParameters(0.5, 0.05, tg.T, psi_1d.sup_norm)
    weights = evaluate_weights(psi_1d, params, tg.midpoints)
    geom = ProblemGeometry(grid_1d, region_1d, psi_1d, tg)
    return params, weights, geom


class TestSamplers:
    def test_smooth_field_boundary_and_seeding(self, grid_1d):
        rng = np.random.default_rng(0)
        v = smooth_random_field(grid_1d, rng)
        assert np.abs(v[grid_1d.boundary_mask]).max() <= 1e-12
        v2 = smooth_random_field(grid_1d, np.random.default_rng(0))
        assert np.array_equal(v, v2)

    def test_spacetime_sampler_shape(self, grid_1d):
        rng = np.random.default_rng(1)
        times = np.linspace(0, 1, 17)
        g = smooth_random_spacetime(grid_1d, times, rng)
        assert g.shape == (17, grid_1d.n_nodes)


class TestCarleman:
    def test_degenerate_sample_flagged(self, diag_setup):
        params, weights, geom = diag_setup
        reports = carleman_check(np.ones(geom.grid.n_nodes), 2, params,
                                 weights, geom, seed=0, amplitude=0.0)
        for r in reports:
            assert r.degenerate
            assert r.rhs_control + r.rhs_source == 0.0

    def test_unit_coefficient_samples(self, diag_setup):
        params, weights, geom = diag_setup
        reports = carleman_check(np.ones(geom.grid.n_nodes), 20, params,
                                 weights, geom, seed=3)
        cs = [r.empirical_C for r in reports if not r.degenerate]
        assert len(cs) == 20
        assert all(np.isfinite(c) and c > 0 for c in cs)
        assert all(r.zeta == 0.0 for r in reports)  # b constant

    def test_refinement_stability(self, grid_1d, region_1d, psi_1d,
                                  diag_setup):
        params, weights, geom = diag_setup
        coarse = max(r.empirical_C for r in carleman_check(
            np.ones(grid_1d.n_nodes), 15, params, weights, geom, seed=5))
        fine_grid = Grid(SpatialDomain.interval(0, 1, 129))
        fine_region = ControlRegion.build(fine_grid, ((0.25, 0.75),),
                                          ((0.4, 0.6),))
        from qlcontrol.weights import construct_psi
        fine_psi = construct_psi(fine_grid, fine_region)
        tg_f = TimeGrid(0.5, 128)
        params_f = CarlemanParameters(0.5, 0.05, tg_f.T, fine_psi.sup_norm)
        weights_f = evaluate_weights(fine_psi, params_f, tg_f.midpoints)
        geom_f = ProblemGeometry(fine_grid, fine_region, fine_psi, tg_f)
        fine = max(r.empirical_C for r in carleman_check(
            np.ones(fine_grid.n_nodes), 15, params_f, weights_f, geom_f,
            seed=5))
        assert abs(fine - coarse) / coarse <= 0.2

    def test_lambda_monotonicity_table(self, grid_1d, region_1d, psi_1d):
        tg = TimeGrid(0.5, 64)
        geom = ProblemGeometry(grid_1d, region_1d, psi_1d, tg)
        table = []
        for lam in (0.4, 0.8):
            params = CarlemanParameters(lam, 0.05, tg.T, psi_1d.sup_norm)
            weights = evaluate_weights(psi_1d, params, tg.midpoints)
            reports = carleman_check(np.ones(grid_1d.n_nodes), 10, params,
                                     weights, geom, seed=11)
            table.append(max(r.empirical_C for r in reports))
        # increasing lambda must not blow the ratio up
        assert table[1] <= 5.0 * table[0]

    def test_measured_zeta_for_varying_coefficient(self, diag_setup):
        params, weights, geom = diag_setup
        tg = geom.tg
        t = tg.layer_times[:, None]
        x = geom.grid.nodes[:, 0][None, :]
        b = 1.0 + 0.2 * np.sin(np.pi * x) * (1.0 + t)
        reports = carleman_check(b, 3, params, weights, geom, seed=2)
        assert all(r.zeta > 0.0 for r in reports)


class TestObservability:
    def test_zero_terminal_degenerate(self, diag_setup):
        params, weights, geom = diag_setup
        reports = observability_check(
            np.ones(geom.grid.n_nodes), 1, params, weights, geom,
            terminal_data=np.zeros(geom.grid.n_nodes))
        assert reports[0].degenerate

    def test_heat_mode_initial_norm(self, grid_1d, region_1d, psi_1d):
        # ||p(0)||_2^2 for pT = sin(pi x) matches the analytic decay
        tg = TimeGrid(0.1, 128)
        params = CarlemanParameters(0.5, 0.05, tg.T, psi_1d.sup_norm)
        weights = evaluate_weights(psi_1d, params, tg.midpoints)
        geom = ProblemGeometry(grid_1d, region_1d, psi_1d, tg)
        pT = np.sin(np.pi * grid_1d.nodes[:, 0])
        reports = observability_check(np.ones(grid_1d.n_nodes), 1, params,
                                      weights, geom, terminal_data=pT)
        exact = 0.5 * np.exp(-2.0 * np.pi ** 2 * tg.T)
        assert reports[0].initial_sq == pytest.approx(exact, rel=0.02)

    def test_random_batch_finite_and_s_dependence(self, grid_1d, region_1d,
                                                  psi_1d):
        # the dual constant here genuinely depends on s: the localized
        # integral carries e^{2 s alpha} with alpha < 0, so doubling s
        # shrinks the denominator and the measured constant grows
        tg = TimeGrid(0.5, 64)
        geom = ProblemGeometry(grid_1d, region_1d, psi_1d, tg)
        cs = []
        for s in (0.05, 0.1):
            params = CarlemanParameters(0.5, s, tg.T, psi_1d.sup_norm)
            weights = evaluate_weights(psi_1d, params, tg.midpoints)
            reports = observability_check(np.ones(grid_1d.n_nodes), 20,
                                          params, weights, geom, seed=13)
            cs.append(max(r.C_initial for r in reports if not r.degenerate))
        assert all(np.isfinite(c) and c > 0 for c in cs)
        assert cs[1] >= cs[0]

    def test_carleman_constant_nonincreasing_in_s(self, grid_1d, region_1d,
                                                  psi_1d):
        # both sides of the weighted dual inequality carry e^{2 s alpha};
        # its empirical constant must not grow when s doubles
        tg = TimeGrid(0.5, 64)
        geom = ProblemGeometry(grid_1d, region_1d, psi_1d, tg)
        cs = []
        for s in (0.1, 0.2):
            params = CarlemanParameters(0.5, s, tg.T, psi_1d.sup_norm)
            weights = evaluate_weights(psi_1d, params, tg.midpoints)
            reports = carleman_check(np.ones(grid_1d.n_nodes), 20, params,
                                     weights, geom, seed=13)
            cs.append(max(r.empirical_C for r in reports if not r.degenerate))
        assert cs[1] <= cs[0] * (1.0 + 1e-9)


class TestSmoothing:
    def test_fit_power_law_recovers_exact_slope(self):
        xs = np.logspace(-3, -1, 6)
        ys = 3.7 * xs ** 0.5
        slope, intercept = fit_power_law(xs, ys)
        assert slope == pytest.approx(0.5, abs=1e-12)
        with pytest.raises(FitDegenerate):
            fit_power_law([1.0, 2.0], [1.0, 2.0])

    def test_scan_runs_and_reports(self, grid_1d):
        model = linear_model(1.0)
        x = grid_1d.nodes[:, 0]
        ys = 0.1 * np.sin(np.pi * x)
        f = manufactured_forcing(model, ys, grid_1d)
        sizes = [10.0 ** (-1 - 0.5 * i) for i in range(5)]
        scan = smoothing_scan(model, ys, f, sizes, T_small=0.1, q=4.0,
                              grid=grid_1d, steps=64)
        assert len(scan.sizes) == 5
        assert np.isfinite(scan.slope)
        # linear dynamics scale exactly linearly in the data
        assert scan.slope == pytest.approx(1.0, abs=1e-6)
        assert scan.residual_slope == pytest.approx(1.0, abs=1e-6)

    def test_trivial_data_excluded(self, grid_1d):
        model = linear_model(1.0)
        x = grid_1d.nodes[:, 0]
        ys = 0.1 * np.sin(np.pi * x)
        f = manufactured_forcing(model, ys, grid_1d)
        with pytest.raises(FitDegenerate):
            smoothing_scan(model, ys, f, [0.0, 0.0, 0.0], T_small=0.1, q=4.0,
                           grid=grid_1d, steps=64)


class TestEstimates:
    def test_trivial_run_all_zero(self, geometry_1d, params_desk,
                                  linear_desk):
        model, ys, f, _ = linear_desk
        state = picard_run(model, ys.values, f.values, geometry_1d,
                           params_desk, y_s=ys.values)
        weights = evaluate_weights(geometry_1d.psi, params_desk,
                                   geometry_1d.tg.midpoints)
        rep = theorem_estimates(state.y, state.u, ys.values, ys.values,
                                weights, q=4.0)
        assert rep.control_weighted_sup <= 1e-10
        assert rep.state_sup <= 1e-12
        assert rep.driver_l2 == 0.0

    def test_controlled_run_finite_components(self, geometry_1d, params_desk,
                                              cubic_desk):
        model, ys, f, y0 = cubic_desk
        state = picard_run(model, y0, f.values, geometry_1d, params_desk,
                           y_s=ys.values)
        weights = evaluate_weights(geometry_1d.psi, params_desk,
                                   geometry_1d.tg.midpoints)
        rep = theorem_estimates(state.y, state.u, ys.values, y0, weights,
                                q=4.0)
        d = rep.as_dict()
        assert all(np.isfinite(v) and v >= 0.0 for v in d.values())
        assert rep.driver_l2 == pytest.approx(1e-2, rel=1e-6)
        assert rep.state_sup <= 2.0 * rep.driver_sup
