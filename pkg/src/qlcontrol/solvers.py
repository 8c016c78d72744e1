"""Implicit-Euler solvers for the quasilinear, linearized, and adjoint equations.

Indexing conventions used throughout the package:

 - trajectories carry layers 0..K at times k*dt;
 - step k (1 <= k <= K) advances layer k-1 to layer k and is associated
   with the time cell (t_{k-1}, t_k), whose midpoint carries the weights;
 - source/control arrays are shaped (K+1, n_nodes) with index k feeding
   step k (index 0 is unused and kept zero);
 - the adjoint recursion runs (I - dt L_k) p^{k-1} = p^k - dt g_k, which is
   the exact transpose of the forward step (I - dt L_k) y^k = y^{k-1} + dt s_k,
   so the summation-by-parts identity

       <y^K, p^K> - <y^0, p^0> = sum_k dt (<s_k, p^{k-1}> + <g_k, y^k>)

   holds to solver precision for every coefficient sequence.

The linearized equation freezes the diffusion coefficient at the new time
layer.  Its face coefficients are chord slopes of a along z, i.e.
(a(z_i) - a(z_j))/(z_i - z_j): for z equal to the trajectory itself the
frozen-coefficient step coincides exactly with the quasilinear implicit
Euler step on Lap_h a(y), which is what makes the outer fixed point an
exact discrete solution of the controlled equation.
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .discretize import (
    ScalarField,
    SpaceTimeField,
    assemble_from_faces,
    field_values,
    harmonic_faces,
    laplacian,
    pcg,
    _strides,
)
from .errors import NewtonDiverged, NonpositiveCoefficient
from .geometry import Grid


@dataclass(frozen=True)
class TimeGrid:
    T: float
    steps: int

    def __post_init__(self):
        if self.steps < 16:
            raise ValueError("time grid needs at least 16 steps")
        if self.T <= 0:
            raise ValueError("horizon must be positive")

    @property
    def dt(self):
        return self.T / self.steps

    @property
    def layer_times(self):
        return np.linspace(0.0, self.T, self.steps + 1)

    @property
    def midpoints(self):
        """Cell midpoints t_{k-1/2}; entry k-1 pairs with step k."""
        return (np.arange(self.steps) + 0.5) * self.dt


@dataclass(frozen=True)
class Trajectory:
    state: SpaceTimeField
    newton_iterations: list = field(default_factory=list)
    residuals: list = field(default_factory=list)

    @property
    def grid(self):
        return self.state.grid

    @property
    def values(self):
        return self.state.values


@dataclass(frozen=True)
class AdjointTrajectory:
    state: SpaceTimeField
    terminal_data: np.ndarray

    @property
    def values(self):
        return self.state.values


def sup_distance(a, b):
    """C(Q-bar) distance between two space-time value arrays."""
    return float(np.abs(np.asarray(a) - np.asarray(b)).max())


# ---------------------------------------------------------------------------
# per-layer operators


def chord_faces(grid, model, z_layer):
    """Per-axis face coefficients from chord slopes of a along z.

    Falls back to a'(midpoint) where neighboring z values coincide.  For
    strictly increasing a the chord slope inherits the bounds of a'.
    """
    z = np.asarray(z_layer, dtype=float)
    strides = _strides(grid.shape)
    faces = []
    for axis in range(grid.ndim):
        stride = strides[axis]
        f = np.zeros(grid.n_nodes)
        j = np.arange(grid.n_nodes - stride)
        dz = z[j + stride] - z[j]
        mid = 0.5 * (z[j + stride] + z[j])
        slope_mid = model.da(mid)
        tiny = np.abs(dz) <= 1e-12 * (1.0 + np.abs(z[j]) + np.abs(z[j + stride]))
        with np.errstate(divide="ignore", invalid="ignore"):
            chord = (model.a(z[j + stride]) - model.a(z[j])) / dz
        f[j] = np.where(tiny, slope_mid, chord)
        faces.append(f)
    return faces


class LayerOperators:
    """System matrices A_k = I - dt L_k for steps 1..K, with cached LU factors.

    The same objects serve the forward and the adjoint sweep, which keeps
    the two maps exact transposes of each other.
    """

    def __init__(self, grid: Grid, tg: TimeGrid, layer_ops):
        if len(layer_ops) != tg.steps:
            raise ValueError("need one elliptic operator per time step")
        self.grid = grid
        self.tg = tg
        self.ops = layer_ops
        n_int = len(grid.interior_idx)
        eye = sp.identity(n_int, format="csr")
        self.mats = [
            (eye - tg.dt * op.matrix).tocsr() for op in layer_ops
        ]
        self._lu = [None] * tg.steps
        self._jacobi = [None] * tg.steps

    @staticmethod
    def from_nodal_b(grid, tg, b_layers):
        """Harmonic-mean faces from nodal coefficients at layers 1..K.

        Accepts (K, n) or (K+1, n) arrays; in the latter case layer k is
        used for step k (coefficient frozen at the new time layer).
        """
        b = np.asarray(b_layers, dtype=float)
        if b.ndim == 1:
            b = np.tile(b, (tg.steps, 1))
        if b.shape[0] == tg.steps + 1:
            b = b[1:]
        if b.min() <= 0.0:
            raise NonpositiveCoefficient(f"min(b) = {b.min():.6g} <= 0")
        ops = [assemble_from_faces(grid, harmonic_faces(grid, b[k]))
               for k in range(tg.steps)]
        return LayerOperators(grid, tg, ops)

    @staticmethod
    def from_chord(grid, tg, model, z_values):
        """Chord-slope faces from a trajectory z (K+1 layers)."""
        z = np.asarray(z_values, dtype=float)
        ops = []
        for k in range(1, tg.steps + 1):
            faces = chord_faces(grid, model, z[k])
            for f in faces:
                # check only assembled faces (last plane per axis is padding)
                if f[f != 0.0].size and f.min() < 0.0:
                    raise NonpositiveCoefficient(
                        f"layer {k}: chord coefficient not positive"
                    )
            ops.append(assemble_from_faces(grid, faces))
        return LayerOperators(grid, tg, ops)

    def solve_step(self, k, rhs, method="lu", rtol=1e-13):
        """Solve A_k x = rhs on interior nodes (k is 1-based)."""
        i = k - 1
        if method == "lu":
            if self._lu[i] is None:
                self._lu[i] = splu(self.mats[i].tocsc())
            return self._lu[i].solve(rhs)
        if self._jacobi[i] is None:
            d = self.mats[i].diagonal()
            self._jacobi[i] = 1.0 / d
        dinv = self._jacobi[i]
        mat = self.mats[i]
        x, _, _ = pcg(lambda v: mat @ v, rhs, rtol=rtol,
                      precond=lambda r: dinv * r)
        return x

    def bilinear(self, k, v_int):
        """Energy form -<L_k v, v> (interior vectors, cell-volume weighted)."""
        i = k - 1
        lv = self.ops[i].matrix @ v_int
        return -float(np.dot(lv, v_int)) * self.grid.cell_volume


def _source_layers(tg, grid, src):
    """Normalize a source to shape (K+1, n); layer 0 is ignored."""
    if src is None:
        return np.zeros((tg.steps + 1, grid.n_nodes))
    if isinstance(src, SpaceTimeField):
        src = src.values
    elif isinstance(src, ScalarField):
        src = src.values
    src = np.asarray(src, dtype=float)
    if src.ndim == 1:
        return np.tile(src, (tg.steps + 1, 1))
    if src.shape[0] == tg.steps:
        return np.vstack([np.zeros((1, grid.n_nodes)), src])
    return src


def linear_forward(ops: LayerOperators, y0, sources, method="lu", rtol=1e-13):
    """March (I - dt L_k) y^k = y^{k-1} + dt s_k from y^0 = y0."""
    grid, tg = ops.grid, ops.tg
    src = _source_layers(tg, grid, sources)
    ii = grid.interior_idx
    y = np.zeros((tg.steps + 1, grid.n_nodes))
    y[0] = field_values(y0)
    for k in range(1, tg.steps + 1):
        rhs = y[k - 1][ii] + tg.dt * src[k][ii]
        y[k][ii] = ops.solve_step(k, rhs, method=method, rtol=rtol)
    return y


def linear_adjoint(ops: LayerOperators, g, pT, method="lu", rtol=1e-13):
    """March (I - dt L_k) p^{k-1} = p^k - dt g_k backward from p^K = pT."""
    grid, tg = ops.grid, ops.tg
    gv = _source_layers(tg, grid, g)
    ii = grid.interior_idx
    p = np.zeros((tg.steps + 1, grid.n_nodes))
    p[tg.steps] = field_values(pT)
    for k in range(tg.steps, 0, -1):
        rhs = p[k][ii] - tg.dt * gv[k][ii]
        p[k - 1][ii] = ops.solve_step(k, rhs, method=method, rtol=rtol)
    return p


# ---------------------------------------------------------------------------
# public solver operations


def _newton_march(model, grid, tg, y0, sources, tol=1e-12, max_iter=50,
                  max_halvings=30):
    """Implicit Euler with Newton per step for y_t - Lap_h a(y) = s."""
    L = laplacian(grid)
    ii = grid.interior_idx
    vol_root = np.sqrt(grid.cell_volume)
    a0 = float(model.a(0.0))
    src = _source_layers(tg, grid, sources)
    y = np.zeros((tg.steps + 1, grid.n_nodes))
    y[0] = field_values(y0)
    iters, residuals = [], []
    eye = sp.identity(len(ii), format="csr")

    for k in range(1, tg.steps + 1):
        rhs = y[k - 1][ii] + tg.dt * src[k][ii]
        yk = y[k - 1].copy()
        yk[grid.boundary_mask] = 0.0

        def residual(vec_full):
            az = model.a(vec_full) - a0
            return vec_full[ii] - tg.dt * (L.matrix @ az[ii]) - rhs

        r = residual(yk)
        rnorm = np.linalg.norm(r) * vol_root
        it = 0
        while rnorm > tol and it < max_iter:
            J = eye - tg.dt * (L.matrix @ sp.diags(model.da(yk[ii])))
            delta = splu(J.tocsc()).solve(-r)
            step = 1.0
            for _ in range(max_halvings):
                trial = yk.copy()
                trial[ii] += step * delta
                r_trial = residual(trial)
                r_trial_norm = np.linalg.norm(r_trial) * vol_root
                if r_trial_norm < rnorm or r_trial_norm <= tol:
                    break
                step *= 0.5
            else:
                raise NewtonDiverged(
                    f"step halving exhausted at layer {k}", layer=k)
            yk = trial
            r, rnorm = r_trial, r_trial_norm
            it += 1
        if rnorm > tol:
            raise NewtonDiverged(
                f"Newton residual {rnorm:.3e} > {tol:.1e} at layer {k}", layer=k)
        y[k] = yk
        iters.append(it)
        residuals.append(rnorm)
    return y, iters, residuals


def solve_uncontrolled(model, y0, f, tg: TimeGrid, grid: Grid,
                       tol=1e-12) -> Trajectory:
    """Free quasilinear evolution Y_t - Lap_h a(Y) = f."""
    y, iters, res = _newton_march(model, grid, tg, y0, f, tol=tol)
    return Trajectory(SpaceTimeField(grid, tg.layer_times, y), iters, res)


def solve_quasilinear_controlled(model, u, y0, f, tg: TimeGrid, grid: Grid,
                                 region=None, tol=1e-12) -> Trajectory:
    """Controlled quasilinear evolution with source m*u + f."""
    uv = _source_layers(tg, grid, u)
    if region is not None:
        uv = uv * region.indicator[None, :]
    fv = _source_layers(tg, grid, f)
    y, iters, res = _newton_march(model, grid, tg, y0, uv + fv, tol=tol)
    return Trajectory(SpaceTimeField(grid, tg.layer_times, y), iters, res)


def solve_linearized(model, z: Trajectory, u, y0, f, tg: TimeGrid,
                     region=None, method="pcg", rtol=1e-13) -> Trajectory:
    """Frozen-coefficient equation y_t - div(b grad y) = m u + f, b from z."""
    grid = z.grid
    ops = LayerOperators.from_chord(grid, tg, model, z.values)
    uv = _source_layers(tg, grid, u)
    if region is not None:
        uv = uv * region.indicator[None, :]
    fv = _source_layers(tg, grid, f)
    y = linear_forward(ops, y0, uv + fv, method=method, rtol=rtol)
    return Trajectory(SpaceTimeField(grid, tg.layer_times, y))


def solve_adjoint(b, g, pT, tg: TimeGrid, grid: Grid = None,
                  method="pcg", rtol=1e-13) -> AdjointTrajectory:
    """Backward dual equation p_t + div(b grad p) = g, p(T) = pT.

    `b` may be a SpaceTimeField, a (K or K+1, n) array, a single nodal
    field, or a prebuilt LayerOperators (which guarantees exact
    transposition against a forward solve sharing the operators).
    """
    if isinstance(b, LayerOperators):
        ops = b
        grid = ops.grid
    else:
        if isinstance(b, SpaceTimeField):
            grid = b.grid
            b = b.values
        elif isinstance(b, ScalarField):
            grid = b.grid
            b = b.values
        ops = LayerOperators.from_nodal_b(grid, tg, b)
    p = linear_adjoint(ops, g, field_values(pT), method=method, rtol=rtol)
    return AdjointTrajectory(SpaceTimeField(grid, tg.layer_times, p),
                             np.array(field_values(pT)))


# ---------------------------------------------------------------------------
# structural identities


def duality_defect(grid, tg, y, p, sources, g):
    """Residual of the summation-by-parts identity for computed y and p."""
    vol = grid.cell_volume
    src = _source_layers(tg, grid, sources)
    gv = _source_layers(tg, grid, g)
    yv = y if isinstance(y, np.ndarray) else y.values
    pv = p if isinstance(p, np.ndarray) else p.values
    lhs = vol * (np.dot(yv[-1], pv[-1]) - np.dot(yv[0], pv[0]))
    acc = 0.0
    for k in range(1, tg.steps + 1):
        acc += tg.dt * vol * (np.dot(src[k], pv[k - 1]) + np.dot(gv[k], yv[k]))
    return float(lhs - acc)


def face_gradient_sq(grid, v):
    """Face-based squared-gradient quadrature sum_faces (dv/h)^2 * cell volume."""
    vals = np.asarray(v, dtype=float)
    strides = _strides(grid.shape)
    total = 0.0
    for axis in range(grid.ndim):
        stride = strides[axis]
        j = np.arange(grid.n_nodes - stride)
        # skip wrapped pairs that cross the fast-axis seam
        if grid.ndim == 2 and axis == 1:
            keep = (j % grid.shape[1]) != grid.shape[1] - 1
            j = j[keep]
        d = (vals[j + stride] - vals[j]) / grid.spacing[axis]
        total += float(np.dot(d, d)) * grid.cell_volume
    return total


def energy_audit(ops: LayerOperators, p_values, g, mu, slack=1e-9):
    """Check the discrete backward energy inequality step by step.

    For each step k the computed adjoint satisfies (up to solver residual)

        ||p^{k-1}||^2 + 2 dt mu |grad p^{k-1}|^2 <=
            ||p^k||^2 + 2 dt int |g_k p^{k-1}|.

    Returns the worst signed margin (negative margin beyond `slack` means a
    genuine violation).
    """
    grid, tg = ops.grid, ops.tg
    vol = grid.cell_volume
    gv = _source_layers(tg, grid, g)
    worst = np.inf
    for k in range(1, tg.steps + 1):
        pk = p_values[k - 1]
        pk1 = p_values[k]
        lhs = vol * np.dot(pk, pk) + 2.0 * tg.dt * mu * face_gradient_sq(grid, pk)
        rhs = vol * np.dot(pk1, pk1) + 2.0 * tg.dt * vol * np.abs(gv[k] * pk).sum()
        scale = max(lhs, rhs, 1.0)
        worst = min(worst, (rhs - lhs) / scale)
    return float(worst)
