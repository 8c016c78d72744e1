"""Diffusion nonlinearities a(.), their globalized extensions, and stationary states.

A model carries evaluators for a, a', a'' together with certified slope
bounds 0 < mu <= a' <= M on its valid range.  `globalize` produces the
extension with globally bounded a', a'', 1/a' that agrees with the input
on a prescribed interval: clamp a'' outside the interval, taper it to zero
with a smooth cutoff, and integrate twice.
"""

from dataclasses import dataclass

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.sparse.linalg import spsolve

from .discretize import ScalarField, field_values, laplacian, lq_norm
from .errors import IntervalOutsideRange, NewtonDiverged

_SAMPLES = 2001


@dataclass(frozen=True)
class NonlinearityModel:
    name: str
    eval_a: callable
    eval_da: callable
    eval_dda: callable
    valid_range: tuple
    mu: float
    M_bound: float

    def a(self, y):
        return self.eval_a(np.asarray(y, dtype=float))

    def da(self, y):
        return self.eval_da(np.asarray(y, dtype=float))

    def dda(self, y):
        return self.eval_dda(np.asarray(y, dtype=float))


def _certify(name, a, da, dda, valid_range):
    lo, hi = valid_range
    ys = np.linspace(lo, hi, _SAMPLES)
    slopes = da(ys)
    if slopes.min() <= 0.0:
        raise ValueError(f"model {name}: a' not positive on the valid range")
    return NonlinearityModel(name, a, da, dda, (float(lo), float(hi)),
                             float(slopes.min()), float(slopes.max()))


def linear_model(c=1.0, valid_range=(-10.0, 10.0)):
    c = float(c)
    return _certify(
        f"linear(c={c})",
        lambda y: c * y,
        lambda y: np.full_like(np.asarray(y, dtype=float), c),
        lambda y: np.zeros_like(np.asarray(y, dtype=float)),
        valid_range,
    )


def cubic_model(beta=1.0, valid_range=(-5.0, 5.0)):
    beta = float(beta)
    return _certify(
        f"cubic(beta={beta})",
        lambda y: y + beta * y ** 3,
        lambda y: 1.0 + 3.0 * beta * np.asarray(y, dtype=float) ** 2,
        lambda y: 6.0 * beta * np.asarray(y, dtype=float),
        valid_range,
    )


def porous_medium_model(m=2.0, eps=0.1, valid_range=(-5.0, 5.0)):
    """Regularized porous-medium nonlinearity (y^2 + eps^2)^{(m-1)/2} y.

    The pure power |y|^{m-1} y has vanishing slope at zero; eps > 0 keeps
    a' strictly positive.
    """
    m, eps = float(m), float(eps)
    if eps <= 0.0:
        raise ValueError("eps must be positive")

    def a(y):
        y = np.asarray(y, dtype=float)
        return (y ** 2 + eps ** 2) ** ((m - 1.0) / 2.0) * y

    def da(y):
        y = np.asarray(y, dtype=float)
        return (y ** 2 + eps ** 2) ** ((m - 3.0) / 2.0) * (m * y ** 2 + eps ** 2)

    def dda(y):
        y = np.asarray(y, dtype=float)
        return ((m - 1.0) * y * (y ** 2 + eps ** 2) ** ((m - 5.0) / 2.0)
                * (m * y ** 2 + 3.0 * eps ** 2))

    return _certify(f"porous_medium(m={m}, eps={eps})", a, da, dda, valid_range)


_CATALOG = {
    "linear": linear_model,
    "cubic": cubic_model,
    "porous_medium": porous_medium_model,
}


def model_from_config(name, **params):
    if name not in _CATALOG:
        raise KeyError(f"unknown nonlinearity {name!r}; have {sorted(_CATALOG)}")
    return _CATALOG[name](**params)


# ---------------------------------------------------------------------------
# globalization


def _cutoff_splines(n=4096):
    """Splines of the mollifier step S (1 -> 0 on [0,1]) and its integrals."""
    u = np.linspace(0.0, 1.0, n + 1)
    with np.errstate(divide="ignore", over="ignore", under="ignore"):
        su = np.where(u > 0.0, np.exp(-1.0 / np.maximum(u, 1e-300)), 0.0)
        s1u = np.where(u < 1.0, np.exp(-1.0 / np.maximum(1.0 - u, 1e-300)), 0.0)
    step = s1u / (su + s1u)
    s_sp = CubicSpline(u, step)
    c1_sp = s_sp.antiderivative()      # exact antiderivative of the spline
    c2_sp = c1_sp.antiderivative()
    return s_sp, c1_sp, c2_sp


_S_SP, _C1_SP, _C2_SP = _cutoff_splines()
_C1_ONE = float(_C1_SP(1.0))
_C2_ONE = float(_C2_SP(1.0))


def globalize(model: NonlinearityModel, interval) -> NonlinearityModel:
    """Extend the model so a', a'', 1/a' are bounded on all of R.

    The result is identical to the input on `interval` (same evaluator
    path).  The transition width starts at 0.1 * |interval| and is halved
    until the extended slope stays strictly positive.
    """
    lo, hi = float(interval[0]), float(interval[1])
    vlo, vhi = model.valid_range
    if lo < vlo or hi > vhi or lo >= hi:
        raise IntervalOutsideRange(
            f"interval ({lo}, {hi}) not inside valid range ({vlo}, {vhi})"
        )

    a_l, a_r = float(model.a(lo)), float(model.a(hi))
    da_l, da_r = float(model.da(lo)), float(model.da(hi))
    dda_l, dda_r = float(model.dda(lo)), float(model.dda(hi))

    delta = 0.1 * (hi - lo)
    for _ in range(60):
        tail_l = da_l - dda_l * delta * _C1_ONE
        tail_r = da_r + dda_r * delta * _C1_ONE
        if tail_l > 0.0 and tail_r > 0.0:
            break
        delta *= 0.5
    else:
        raise IntervalOutsideRange("could not find a positive-slope transition width")

    # values at the outer edges of the two transition zones
    a_redge = a_r + da_r * delta + dda_r * delta ** 2 * _C2_ONE
    a_ledge = a_l - da_l * delta + dda_l * delta ** 2 * _C2_ONE

    def branches(y, inside, right_tr, right_tail, left_tr, left_tail):
        y = np.asarray(y, dtype=float)
        out = np.empty_like(y)
        m = (y >= lo) & (y <= hi)
        if m.any():
            out[m] = inside(y[m])
        m = (y > hi) & (y <= hi + delta)
        if m.any():
            out[m] = right_tr(y[m], (y[m] - hi) / delta)
        m = y > hi + delta
        if m.any():
            out[m] = right_tail(y[m])
        m = (y < lo) & (y >= lo - delta)
        if m.any():
            out[m] = left_tr(y[m], (lo - y[m]) / delta)
        m = y < lo - delta
        if m.any():
            out[m] = left_tail(y[m])
        return out

    def A(y):
        return branches(
            y,
            model.eval_a,
            lambda yy, u: a_r + da_r * (yy - hi) + dda_r * delta ** 2 * _C2_SP(u),
            lambda yy: a_redge + tail_r * (yy - hi - delta),
            lambda yy, u: a_l - da_l * (lo - yy) + dda_l * delta ** 2 * _C2_SP(u),
            lambda yy: a_ledge + tail_l * (yy - lo + delta),
        )

    def dA(y):
        return branches(
            y,
            model.eval_da,
            lambda yy, u: da_r + dda_r * delta * _C1_SP(u),
            lambda yy: np.full_like(yy, tail_r),
            lambda yy, u: da_l - dda_l * delta * _C1_SP(u),
            lambda yy: np.full_like(yy, tail_l),
        )

    def ddA(y):
        return branches(
            y,
            model.eval_dda,
            lambda yy, u: dda_r * _S_SP(u),
            lambda yy: np.zeros_like(yy),
            lambda yy, u: dda_l * _S_SP(u),
            lambda yy: np.zeros_like(yy),
        )

    core = np.linspace(lo, hi, _SAMPLES)
    mu_A = min(float(model.da(core).min()), tail_l, tail_r)
    M_A = max(float(model.da(core).max()),
              float(dA(np.linspace(lo - delta, hi + delta, _SAMPLES)).max()))
    return NonlinearityModel(
        f"globalized({model.name}, [{lo}, {hi}], delta={delta:.3g})",
        A, dA, ddA, (-np.inf, np.inf), mu_A, M_A,
    )


# ---------------------------------------------------------------------------
# stationary states


@dataclass(frozen=True)
class StationaryState:
    y_s: ScalarField
    f: ScalarField
    residual_norm: float


def invert_a(model: NonlinearityModel, w, max_iter=50, tol=1e-14):
    """Solve a(y) = w per entry: safeguarded Newton with a bisection bracket."""
    w = np.asarray(w, dtype=float)
    # expand brackets by doubling; a is strictly increasing
    lo = np.full_like(w, -1.0)
    hi = np.full_like(w, 1.0)
    for _ in range(200):
        bad_lo = model.a(lo) > w
        bad_hi = model.a(hi) < w
        if not bad_lo.any() and not bad_hi.any():
            break
        lo[bad_lo] *= 2.0
        hi[bad_hi] *= 2.0
    y = 0.5 * (lo + hi)
    scale = 1.0 + np.abs(w)
    for _ in range(max_iter):
        r = model.a(y) - w
        if np.all(np.abs(r) <= tol * scale):
            return y
        above = r > 0.0
        hi = np.where(above, y, hi)
        lo = np.where(above, lo, y)
        step = r / model.da(y)
        y_new = y - step
        outside = (y_new < lo) | (y_new > hi)
        y = np.where(outside, 0.5 * (lo + hi), y_new)
    r = model.a(y) - w
    if np.all(np.abs(r) <= 10 * tol * scale):
        return y
    raise NewtonDiverged(
        f"scalar inversion stalled, max residual {np.abs(r).max():.3e}"
    )


def solve_stationary(model: NonlinearityModel, f, grid) -> StationaryState:
    """Solve -Lap_h a(y_s) = f: one linear solve for w = a(y_s), then invert a."""
    fv = field_values(f)
    L = laplacian(grid)
    w_int = spsolve((-L.matrix).tocsc(), fv[grid.interior_idx])
    w = np.zeros(grid.n_nodes)
    w[grid.interior_idx] = w_int
    y = invert_a(model, w)
    y[grid.boundary_mask] = 0.0
    residual = L.apply_full(model.a(y) - model.a(0.0)) + fv
    residual[grid.boundary_mask] = 0.0  # stationarity is an interior statement
    return StationaryState(ScalarField(grid, y), ScalarField(grid, fv),
                           lq_norm(residual, 2, grid))


def manufactured_forcing(model: NonlinearityModel, y_s, grid) -> ScalarField:
    """f = -Lap_h a(y_s): makes y_s an exact stationary point of the scheme."""
    ys = field_values(y_s)
    f = -laplacian(grid).apply_full(model.a(ys) - model.a(0.0))
    return ScalarField(grid, f)
