import numpy as np
import pytest
import scipy.sparse.linalg as spla

from qlcontrol.discretize import (
    ScalarField,
    SpaceTimeField,
    assemble_elliptic,
    export_field_csv,
    export_spacetime_csv,
    laplacian,
    load_array_bin,
    lq_norm,
    pcg,
    save_array_bin,
    weighted_spacetime_norm,
)
from qlcontrol.errors import BadExponent, NonpositiveCoefficient
from qlcontrol.geometry import Grid, SpatialDomain
from qlcontrol.solvers import TimeGrid
from qlcontrol.weights import CarlemanParameters, evaluate_weights


class TestAssembleElliptic:
    def test_constant_coefficient_tridiagonal(self, grid_1d):
        h = grid_1d.spacing[0]
        op = assemble_elliptic(np.ones(grid_1d.n_nodes), grid_1d)
        dense = op.matrix.toarray()
        n = dense.shape[0]
        expected = (np.diag(np.full(n, -2.0)) + np.diag(np.ones(n - 1), 1)
                    + np.diag(np.ones(n - 1), -1)) / h ** 2
        assert np.allclose(dense, expected, rtol=0, atol=1e-12 / h ** 2)

    def test_sine_eigenvalue(self):
        grid = Grid(SpatialDomain.interval(0, 1, 64))
        op = laplacian(grid)
        v = np.sin(np.pi * grid.nodes[:, 0])
        lv = op.apply_full(v)
        interior = grid.interior_mask
        rayleigh = -np.dot(lv[interior], v[interior]) / np.dot(
            v[interior], v[interior])
        assert abs(rayleigh - np.pi ** 2) / np.pi ** 2 < 0.005

    def test_random_coefficient_symmetric_negative(self, grid_1d):
        rng = np.random.default_rng(3)
        b = 0.5 + 1.5 * rng.random(grid_1d.n_nodes)
        op = assemble_elliptic(b, grid_1d)
        asym = abs(op.matrix - op.matrix.T).max()
        assert asym <= 1e-13
        top = spla.eigsh(op.matrix, k=1, which="LA",
                         return_eigenvectors=False)[0]
        assert top < 0.0

    def test_2d_symmetry_and_definiteness(self):
        grid = Grid(SpatialDomain.rectangle(nodes=(17, 13)))
        rng = np.random.default_rng(5)
        b = 0.5 + 1.5 * rng.random(grid.n_nodes)
        op = assemble_elliptic(b, grid)
        assert abs(op.matrix - op.matrix.T).max() <= 1e-13
        top = spla.eigsh(op.matrix, k=1, which="LA",
                         return_eigenvectors=False)[0]
        assert top < 0.0

    def test_nonpositive_coefficient(self, grid_1d):
        b = np.ones(grid_1d.n_nodes)
        b[5] = 0.0
        with pytest.raises(NonpositiveCoefficient):
            assemble_elliptic(b, grid_1d)

    def test_adjoint_identity(self, grid_1d):
        rng = np.random.default_rng(11)
        b = 0.5 + 1.5 * rng.random(grid_1d.n_nodes)
        op = assemble_elliptic(b, grid_1d)
        for _ in range(5):
            v = rng.standard_normal(op.matrix.shape[0])
            w = rng.standard_normal(op.matrix.shape[0])
            lv_w = np.dot(op.matrix @ v, w)
            v_lw = np.dot(v, op.matrix @ w)
            assert abs(lv_w - v_lw) <= 1e-12 * max(abs(lv_w), 1.0)

    def test_manufactured_spatial_order(self):
        errors = []
        for n in (33, 65, 129):
            grid = Grid(SpatialDomain.interval(0, 1, n))
            v = np.sin(np.pi * grid.nodes[:, 0])
            residual = laplacian(grid).apply_full(v) + np.pi ** 2 * v
            residual[grid.boundary_mask] = 0.0
            errors.append(np.abs(residual).max())
        orders = [np.log2(errors[i] / errors[i + 1]) for i in range(2)]
        assert min(orders) >= 1.9


class TestNorms:
    def test_constant_field(self, grid_1d):
        assert lq_norm(np.ones(grid_1d.n_nodes), 2, grid_1d) == pytest.approx(
            1.0, abs=1e-12)

    def test_sine_l2(self, grid_1d_fine):
        v = np.sin(np.pi * grid_1d_fine.nodes[:, 0])
        assert lq_norm(v, 2, grid_1d_fine) == pytest.approx(
            np.sqrt(0.5), abs=1e-3)

    def test_zero_and_sup(self, grid_1d):
        assert lq_norm(np.zeros(grid_1d.n_nodes), 2, grid_1d) == 0.0
        v = np.linspace(-3, 2, grid_1d.n_nodes)
        assert lq_norm(v, np.inf, grid_1d) == 3.0

    def test_bad_exponent(self, grid_1d):
        with pytest.raises(BadExponent):
            lq_norm(np.ones(grid_1d.n_nodes), 0.5, grid_1d)


class TestWeightedNorm:
    def _weights(self, psi, T=1.0, steps=32, s=1.0, lam=1.0):
        params = CarlemanParameters(lam, s, T, psi.sup_norm)
        return evaluate_weights(psi, params, TimeGrid(T, steps).midpoints)

    def test_zero_field(self, grid_1d, psi_1d):
        wf = self._weights(psi_1d)
        tg = TimeGrid(1.0, 32)
        field = SpaceTimeField.zeros(grid_1d, tg.layer_times)
        assert weighted_spacetime_norm(field, wf, 1.0, 0, 2, 2) == 0.0

    def test_unweighted_reduction(self, grid_1d, psi_1d):
        # s = 0, i = 0 gives the plain mixed norm
        wf = self._weights(psi_1d)
        tg = TimeGrid(1.0, 32)
        rng = np.random.default_rng(0)
        vals = rng.standard_normal((tg.steps + 1, grid_1d.n_nodes))
        field = SpaceTimeField(grid_1d, tg.layer_times, vals)
        got = weighted_spacetime_norm(field, wf, 0.0, 0, 2, 2)
        mids = field.at_times(wf.times)
        expected = np.sqrt(sum(
            tg.dt * lq_norm(mids[k], 2, grid_1d) ** 2
            for k in range(len(wf.times))))
        assert got == pytest.approx(expected, rel=1e-14)

    def test_constant_field_vs_refined_quadrature(self, grid_1d, psi_1d):
        # oracle: same integrand on a 16x finer midpoint grid
        tg = TimeGrid(1.0, 32)
        wf = self._weights(psi_1d, steps=32, s=1.0)
        field = SpaceTimeField(
            grid_1d, tg.layer_times,
            np.ones((tg.steps + 1, grid_1d.n_nodes)))
        coarse = weighted_spacetime_norm(field, wf, 1.0, 1, 2, 2)
        tg_f = TimeGrid(1.0, 32 * 16)
        wf_f = self._weights(psi_1d, steps=32 * 16, s=1.0)
        field_f = SpaceTimeField(
            grid_1d, tg_f.layer_times,
            np.ones((tg_f.steps + 1, grid_1d.n_nodes)))
        fine = weighted_spacetime_norm(field_f, wf_f, 1.0, 1, 2, 2)
        assert coarse == pytest.approx(fine, rel=1e-6)

    def test_window_split(self, grid_1d, psi_1d):
        wf = self._weights(psi_1d)
        tg = TimeGrid(1.0, 32)
        rng = np.random.default_rng(1)
        field = SpaceTimeField(grid_1d, tg.layer_times,
                               rng.standard_normal((33, grid_1d.n_nodes)))
        full = weighted_spacetime_norm(field, wf, 1.0, 0, 2, 2)
        lo = weighted_spacetime_norm(field, wf, 1.0, 0, 2, 2,
                                     t_window=(0, 0.5))
        hi = weighted_spacetime_norm(field, wf, 1.0, 0, 2, 2,
                                     t_window=(0.5, 1.0))
        assert np.hypot(lo, hi) == pytest.approx(full, rel=1e-12)


class TestPcg:
    def test_matches_direct_solve(self):
        rng = np.random.default_rng(4)
        n = 40
        m = rng.standard_normal((n, n))
        a = m @ m.T + n * np.eye(n)
        b = rng.standard_normal(n)
        x, iters, relres = pcg(lambda v: a @ v, b, rtol=1e-13,
                               precond=lambda r: r / np.diag(a))
        assert np.allclose(x, np.linalg.solve(a, b), atol=1e-9)
        assert relres <= 1e-13


class TestSerialization:
    def test_binary_round_trip(self, tmp_path):
        rng = np.random.default_rng(9)
        arr = rng.standard_normal((7, 13))
        path = tmp_path / "field.bin"
        save_array_bin(path, arr)
        back = load_array_bin(path)
        assert back.shape == arr.shape
        assert np.array_equal(back, arr)

    def test_csv_exports(self, tmp_path, grid_1d):
        v = ScalarField.from_function(grid_1d, lambda x: x ** 2)
        path = tmp_path / "f.csv"
        export_field_csv(path, grid_1d, v)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "x,value"
        assert len(lines) == 1 + grid_1d.n_nodes
        stf = SpaceTimeField.zeros(grid_1d, np.array([0.0, 0.5, 1.0]))
        path2 = tmp_path / "st.csv"
        export_spacetime_csv(path2, stf)
        assert len(path2.read_text().strip().splitlines()) == 1 + 3 * grid_1d.n_nodes
