"""Fields, sparse elliptic operators, norms, and serialization.

The elliptic operator div(b grad .) is discretized with second-order
central fluxes on interior nodes, homogeneous Dirichlet rows eliminated.
Face coefficients are harmonic means of the nodal coefficient, which keeps
the assembled matrix symmetric for any positive b.

Quadrature conventions shared by every norm in the package: trapezoid in
space over nodes, midpoint in time.
"""

import csv
import struct
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .errors import BadExponent, LinearSolveStalled, NonpositiveCoefficient
from .geometry import Grid


@dataclass(frozen=True)
class ScalarField:
    """Node-indexed values on one time layer."""

    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        if len(self.values) != self.grid.n_nodes:
            raise ValueError("field length does not match node count")

    @staticmethod
    def zeros(grid):
        return ScalarField(grid, np.zeros(grid.n_nodes))

    @staticmethod
    def from_function(grid, fn):
        coords = [grid.nodes[:, a] for a in range(grid.ndim)]
        return ScalarField(grid, np.asarray(fn(*coords), dtype=float))


@dataclass(frozen=True)
class SpaceTimeField:
    """Time-layer-indexed scalar fields sharing one grid."""

    grid: Grid
    times: np.ndarray           # (n_layers,)
    values: np.ndarray          # (n_layers, n_nodes)

    def __post_init__(self):
        if self.values.shape != (len(self.times), self.grid.n_nodes):
            raise ValueError("layer array shape does not match times/grid")

    @staticmethod
    def zeros(grid, times):
        times = np.asarray(times, dtype=float)
        return SpaceTimeField(grid, times, np.zeros((len(times), grid.n_nodes)))

    def layer(self, k):
        return ScalarField(self.grid, self.values[k])

    def at_times(self, t):
        """Linear interpolation of the layers to times t, shape (len(t), n_nodes)."""
        t = np.asarray(t, dtype=float)
        k = np.clip(np.searchsorted(self.times, t, side="right") - 1, 0,
                    len(self.times) - 2)
        w = (t - self.times[k]) / (self.times[k + 1] - self.times[k])
        return (1.0 - w)[:, None] * self.values[k] + w[:, None] * self.values[k + 1]


def field_values(f):
    """Accept a ScalarField or a bare array."""
    return f.values if isinstance(f, ScalarField) else np.asarray(f, dtype=float)


@dataclass(frozen=True)
class SparseOperator:
    """Sparse matrix over interior nodes; symmetric by construction."""

    grid: Grid
    matrix: sp.csr_matrix
    symmetric: bool = True

    def restrict(self, full):
        return np.asarray(full)[self.grid.interior_idx]

    def extend(self, interior):
        out = np.zeros(self.grid.n_nodes)
        out[self.grid.interior_idx] = interior
        return out

    def apply_full(self, full):
        """Apply to a full node vector (boundary values treated as zero)."""
        return self.extend(self.matrix @ self.restrict(full))


def _strides(shape):
    out = []
    s = 1
    for n in reversed(shape):
        out.append(s)
        s *= n
    return tuple(reversed(out))


def assemble_from_faces(grid, face_coeff):
    """Assemble div(b grad .) from per-axis face coefficient arrays.

    face_coeff[axis][j] is the coefficient on the face between flat node j
    and its +1 neighbor along that axis (entries past the last plane are
    ignored).  Rows exist for interior nodes only; couplings into boundary
    nodes are dropped (homogeneous Dirichlet).
    """
    shape = grid.shape
    strides = _strides(shape)
    idx = grid.interior_idx
    n_int = len(idx)
    imap = np.full(grid.n_nodes, -1, dtype=np.int64)
    imap[idx] = np.arange(n_int)

    diag = np.zeros(n_int)
    rows, cols, vals = [], [], []
    for axis in range(grid.ndim):
        stride = strides[axis]
        h2 = grid.spacing[axis] ** 2
        fp = face_coeff[axis][idx] / h2            # face to +1 neighbor
        fm = face_coeff[axis][idx - stride] / h2   # face to -1 neighbor
        diag -= fp + fm
        for sign, f, nb in ((+1, fp, idx + stride), (-1, fm, idx - stride)):
            keep = grid.interior_mask[nb]
            rows.append(imap[idx[keep]])
            cols.append(imap[nb[keep]])
            vals.append(f[keep])
    rows.append(np.arange(n_int))
    cols.append(np.arange(n_int))
    vals.append(diag)
    mat = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n_int, n_int),
    )
    return SparseOperator(grid, mat)


def harmonic_faces(grid, b):
    """Per-axis face arrays from harmonic means of the nodal coefficient."""
    b = field_values(b)
    shape = grid.shape
    strides = _strides(shape)
    faces = []
    for axis in range(grid.ndim):
        stride = strides[axis]
        f = np.zeros(grid.n_nodes)
        j = np.arange(grid.n_nodes - stride)
        f[j] = 2.0 * b[j] * b[j + stride] / (b[j] + b[j + stride])
        faces.append(f)
    return faces


def assemble_elliptic(b, grid) -> SparseOperator:
    """div(b grad .) with harmonic-mean faces and Dirichlet rows eliminated."""
    bv = field_values(b)
    if bv.min() <= 0.0:
        raise NonpositiveCoefficient(f"min(b) = {bv.min():.6g} <= 0")
    return assemble_from_faces(grid, harmonic_faces(grid, bv))


_LAPLACIANS = {}


def laplacian(grid) -> SparseOperator:
    """Unit-coefficient operator, cached per grid object."""
    key = id(grid)
    if key not in _LAPLACIANS:
        _LAPLACIANS[key] = assemble_elliptic(np.ones(grid.n_nodes), grid)
    return _LAPLACIANS[key]


# ---------------------------------------------------------------------------
# norms and quadrature


def lq_norm(field, q, grid=None):
    """Trapezoid-quadrature L^q norm over the spatial grid; max for q = inf."""
    if isinstance(field, ScalarField):
        grid = field.grid
    v = field_values(field)
    if q == np.inf or q == "inf":
        return float(np.abs(v).max())
    q = float(q)
    if q < 1.0:
        raise BadExponent(f"q = {q} < 1")
    w = grid.trapezoid_weights
    return float((w @ np.abs(v) ** q) ** (1.0 / q))


def inner_l2(grid, u, v):
    """Plain cell-volume inner product over all nodes (fields vanish on the boundary)."""
    return float(grid.cell_volume * np.dot(field_values(u), field_values(v)))


def grad_sup_norm(field, grid=None):
    """sup over nodes of |grad v|: centered differences inside, one-sided at the boundary."""
    if isinstance(field, ScalarField):
        grid = field.grid
    v = field_values(field).reshape(grid.shape)
    if grid.ndim == 1:
        g = np.gradient(v, grid.spacing[0])
        mag2 = g ** 2
    else:
        gx, gy = np.gradient(v, grid.spacing[0], grid.spacing[1])
        mag2 = gx ** 2 + gy ** 2
    return float(np.sqrt(mag2.max()))


def _time_quadrature(space_norms, dt, q_time):
    if q_time == np.inf or q_time == "inf":
        return float(space_norms.max()) if len(space_norms) else 0.0
    q_time = float(q_time)
    if q_time < 1.0:
        raise BadExponent(f"time exponent {q_time} < 1")
    return float((dt * (space_norms ** q_time)).sum() ** (1.0 / q_time))


def weighted_space_norms(field, weights, s, i, q_space):
    """Per-midpoint-time space norms of e^{s*alpha} phi^{-i} field.

    The field is interpolated to the weight's time nodes; exponents are
    clipped per the weight clamp before exponentiation.
    """
    vals = field.at_times(weights.times)
    arg = s * weights.alpha
    w = np.exp(np.clip(arg, -weights.clamp_exponent, weights.clamp_exponent))
    if i:
        w = w * weights.phi ** (-float(i))
    integrand = w * vals
    return np.array([lq_norm(integrand[k], q_space, field.grid)
                     for k in range(len(weights.times))])


def weighted_spacetime_norm(field, weights, s, i, q_time, q_space,
                            t_window=None):
    """Mixed L^{q_time}(window; L^{q_space}) norm with Carleman weighting.

    `s` multiplies alpha directly (pass params.s, -params.s, ... as needed);
    `i` is the phi^{-i} power.  Midpoint rule in time over the weight nodes
    restricted to t_window.
    """
    norms = weighted_space_norms(field, weights, s, i, q_space)
    times = weights.times
    if t_window is not None:
        lo, hi = t_window
        keep = (times >= lo) & (times <= hi)
        norms = norms[keep]
        times = times[keep]
    if len(times) == 0:
        return 0.0
    dt = float(times[1] - times[0]) if len(times) > 1 else float(
        weights.params.horizon_T / max(len(weights.times), 1))
    return _time_quadrature(norms, dt, q_time)


# ---------------------------------------------------------------------------
# preconditioned conjugate gradient


def pcg(apply_A, b, x0=None, rtol=1e-13, maxiter=None, precond=None,
        raise_on_stall=True):
    """Conjugate gradient for SPD operators with optional diagonal preconditioner.

    apply_A : callable array -> array
    precond : callable array -> array applying M^{-1} (identity if None)

    Returns (x, iterations, relative_residual).
    """
    b = np.asarray(b, dtype=float)
    n = len(b)
    if maxiter is None:
        maxiter = max(20 * n, 200)
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float)
    r = b - apply_A(x) if x.any() else b.copy()
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return np.zeros(n), 0, 0.0
    z = precond(r) if precond else r.copy()
    d = z.copy()
    rz = float(np.dot(r, z))
    k = 0
    while np.linalg.norm(r) > rtol * bnorm and k < maxiter:
        Ad = apply_A(d)
        dAd = float(np.dot(d, Ad))
        if dAd <= 0.0:
            raise LinearSolveStalled("operator lost positive definiteness")
        alpha = rz / dAd
        x += alpha * d
        r -= alpha * Ad
        z = precond(r) if precond else r
        rz_new = float(np.dot(r, z))
        d = z + (rz_new / rz) * d
        rz = rz_new
        k += 1
    relres = float(np.linalg.norm(r) / bnorm)
    if relres > rtol and raise_on_stall:
        raise LinearSolveStalled(
            f"pcg: relative residual {relres:.3e} > {rtol:.1e} after {k} iterations"
        )
    return x, k, relres


# ---------------------------------------------------------------------------
# serialization

_MAGIC = b"QLF1"


def save_array_bin(path, array):
    """Compact layout: magic, uint32 rank, uint32 dims, float64 payload (LE)."""
    arr = np.ascontiguousarray(array, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.tobytes())


def load_array_bin(path):
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _MAGIC:
            raise ValueError(f"{path}: not a field binary (bad magic)")
        (rank,) = struct.unpack("<I", fh.read(4))
        shape = struct.unpack(f"<{rank}I", fh.read(4 * rank))
        data = np.frombuffer(fh.read(), dtype="<f8")
    return data.reshape(shape).astype(float)


def export_field_csv(path, grid, values, value_name="value"):
    v = field_values(values)
    headers = ["x", "y"][: grid.ndim] + [value_name]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(headers)
        for j in range(grid.n_nodes):
            writer.writerow([f"{c:.17g}" for c in grid.nodes[j]] + [f"{v[j]:.17g}"])


def export_spacetime_csv(path, stf: SpaceTimeField, value_name="value"):
    grid = stf.grid
    headers = ["t"] + ["x", "y"][: grid.ndim] + [value_name]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(headers)
        for k, t in enumerate(stf.times):
            for j in range(grid.n_nodes):
                writer.writerow(
                    [f"{t:.17g}"]
                    + [f"{c:.17g}" for c in grid.nodes[j]]
                    + [f"{stf.values[k, j]:.17g}"]
                )
