"""Numerical verification of the Carleman, observability, energy, and
smoothing estimates, plus the main-theorem estimate report.

Verification is sampling-based: adjoint data are smooth random fields
(truncated sine series with decaying coefficients, seeded), and every
empirical constant is reported as a maximum over the sampled family
together with the ingredients needed for refinement-stability checks.
No universal claim is made beyond the sampled family.
"""

from dataclasses import dataclass

import numpy as np

from .discretize import (
    SpaceTimeField,
    field_values,
    grad_sup_norm,
    laplacian,
    lq_norm,
)
from .errors import DiagnosticViolation, FitDegenerate
from .solvers import (
    LayerOperators,
    TimeGrid,
    Trajectory,
    energy_audit,
    linear_adjoint,
    solve_uncontrolled,
)
from .weights import WeightFields


# ---------------------------------------------------------------------------
# smooth random samples


def smooth_random_field(grid, rng, n_modes=6, decay=2.0, amplitude=1.0):
    """Truncated sine series with coefficients ~ N(0,1) * j^-decay."""
    out = np.zeros(grid.n_nodes)
    if grid.ndim == 1:
        lo, hi = grid.domain.bounds[0]
        xh = (grid.nodes[:, 0] - lo) / (hi - lo)
        for j in range(1, n_modes + 1):
            out += rng.standard_normal() * j ** -decay * np.sin(j * np.pi * xh)
    else:
        hats = []
        for axis in range(2):
            lo, hi = grid.domain.bounds[axis]
            hats.append((grid.nodes[:, axis] - lo) / (hi - lo))
        for j in range(1, n_modes + 1):
            for l in range(1, n_modes + 1):
                c = rng.standard_normal() * (j * l) ** -decay
                out += c * np.sin(j * np.pi * hats[0]) * np.sin(l * np.pi * hats[1])
    return amplitude * out


def smooth_random_spacetime(grid, times, rng, n_modes=6, decay=2.0,
                            amplitude=1.0):
    """Space-time sample: each sine mode carries a smooth random time profile."""
    T = float(times[-1]) if len(times) else 1.0
    base = [smooth_random_field(grid, rng, n_modes, decay) for _ in range(3)]
    t = np.asarray(times) / max(T, 1e-300)
    profiles = np.stack([
        np.ones_like(t),
        t,
        np.sin(np.pi * t),
    ])
    coef = rng.standard_normal(3)
    out = np.zeros((len(times), grid.n_nodes))
    for c, prof, fld in zip(coef, profiles, base):
        out += c * prof[:, None] * fld[None, :]
    return amplitude * out


# ---------------------------------------------------------------------------
# shared quadrature helpers (midpoint in time, trapezoid in space)


def _midpoint_values(layers, layer_times, mid_times):
    k = np.clip(np.searchsorted(layer_times, mid_times, side="right") - 1,
                0, len(layer_times) - 2)
    w = (mid_times - layer_times[k]) / (layer_times[k + 1] - layer_times[k])
    return (1.0 - w)[:, None] * layers[k] + w[:, None] * layers[k + 1]


def spacetime_integral(grid, integrand, dt):
    """sum_k dt * trapezoid_space(integrand_k)."""
    w = grid.trapezoid_weights
    return float(dt * (integrand @ w).sum())


def grad_sq_layers(grid, layers):
    """Nodal |grad v|^2 per layer via centered/one-sided differences."""
    out = np.empty_like(layers)
    for k in range(layers.shape[0]):
        v = layers[k].reshape(grid.shape)
        if grid.ndim == 1:
            g = np.gradient(v, grid.spacing[0])
            out[k] = (g ** 2).ravel()
        else:
            gx, gy = np.gradient(v, grid.spacing[0], grid.spacing[1])
            out[k] = (gx ** 2 + gy ** 2).ravel()
    return out


def measure_zeta(b_layers, layer_times, grid):
    """||b_t||_{L^inf(0,T;L^n)} + ||grad b||_{L^inf(Q)} (n = max(dim, 2))."""
    b = np.asarray(b_layers, dtype=float)
    if b.ndim == 1:
        return 0.0
    q = float(max(grid.ndim, 2))
    dtv = np.diff(layer_times)
    bt = max(
        (lq_norm((b[k + 1] - b[k]) / dtv[k], q, grid) for k in range(len(dtv))),
        default=0.0,
    )
    gb = max(grad_sup_norm(b[k], grid) for k in range(b.shape[0]))
    return float(bt + gb)


# ---------------------------------------------------------------------------
# Carleman and observability checks


@dataclass(frozen=True)
class CarlemanReport:
    sample: int
    lhs: float
    rhs_control: float
    rhs_source: float
    zeta: float
    empirical_C: float
    degenerate: bool


def carleman_check(b, samples, params, weights: WeightFields, geometry,
                   seed=0, amplitude=1.0):
    """Sample the weighted dual inequality with random smooth (g, pT).

    For each sample the adjoint equation is solved with coefficient b and
    both sides of the inequality are evaluated with midpoint/trapezoid
    quadrature; the empirical constant is lhs / (rhs_control (1 + zeta) +
    rhs_source).
    """
    grid, tg = geometry.grid, geometry.tg
    rng = np.random.default_rng(seed)
    s, lam = params.s, params.lam
    e2sa = weights.exp_s_alpha(2.0)
    phi3 = weights.phi ** 3
    mids = weights.times
    layer_times = tg.layer_times
    omega = geometry.region.indicator
    b_layers = _coerce_layers(b, tg, grid)
    zeta = measure_zeta(b_layers, layer_times, grid)
    ops = LayerOperators.from_nodal_b(grid, tg, b_layers)
    mu = float(np.min(b_layers))
    reports = []
    for i in range(samples):
        g = smooth_random_spacetime(grid, layer_times, rng, amplitude=amplitude)
        pT = smooth_random_field(grid, rng, amplitude=amplitude)
        g[:, grid.boundary_mask] = 0.0
        pT[grid.boundary_mask] = 0.0
        p_vals = linear_adjoint(ops, g, pT)
        _audit_or_abort(ops, p_vals, g, mu, i)
        pm = _midpoint_values(p_vals, layer_times, mids)
        gm = _midpoint_values(g, layer_times, mids)
        grad2 = grad_sq_layers(grid, pm)
        lhs = spacetime_integral(
            grid,
            e2sa * ((s * lam) ** 3 * phi3 * pm ** 2
                    + s * lam * weights.phi * grad2),
            tg.dt,
        )
        rhs_c = spacetime_integral(
            grid, e2sa * (s * lam) ** 3 * phi3 * pm ** 2 * omega[None, :], tg.dt)
        rhs_g = spacetime_integral(grid, e2sa * gm ** 2, tg.dt)
        degenerate = lhs <= 1e-300
        C = 0.0 if degenerate else lhs / (rhs_c * (1.0 + zeta) + rhs_g)
        reports.append(CarlemanReport(i, lhs, rhs_c, rhs_g, zeta, C, degenerate))
    return reports


@dataclass(frozen=True)
class ObservabilityReport:
    sample: int
    initial_sq: float            # int p(0)^2
    first_half_sq: float         # int_0^{T/2} int p^2
    localized: float             # int_{Q_omega} e^{2s alpha} phi^3 p^2
    zeta: float
    C_initial: float
    C_first_half: float
    degenerate: bool


def observability_check(b, samples, params, weights: WeightFields, geometry,
                        seed=0, amplitude=1.0, terminal_data=None):
    """Dual observability constants with g = 0 and random smooth pT."""
    grid, tg = geometry.grid, geometry.tg
    rng = np.random.default_rng(seed)
    e2sa = weights.exp_s_alpha(2.0)
    phi3 = weights.phi ** 3
    mids = weights.times
    layer_times = tg.layer_times
    omega = geometry.region.indicator
    b_layers = _coerce_layers(b, tg, grid)
    zeta = measure_zeta(b_layers, layer_times, grid)
    ops = LayerOperators.from_nodal_b(grid, tg, b_layers)
    mu = float(np.min(b_layers))
    reports = []
    for i in range(samples):
        if terminal_data is not None:
            pT = np.asarray(terminal_data, dtype=float).copy()
        else:
            pT = smooth_random_field(grid, rng, amplitude=amplitude)
        pT[grid.boundary_mask] = 0.0
        p_vals = linear_adjoint(ops, None, pT)
        _audit_or_abort(ops, p_vals, None, mu, i)
        pm = _midpoint_values(p_vals, layer_times, mids)
        w = grid.trapezoid_weights
        initial_sq = float(w @ p_vals[0] ** 2)
        half = mids <= tg.T / 2.0
        first_half_sq = float(tg.dt * ((pm[half] ** 2) @ w).sum())
        localized = spacetime_integral(
            grid, e2sa * phi3 * pm ** 2 * omega[None, :], tg.dt)
        denom = localized * (1.0 + zeta)
        degenerate = initial_sq <= 1e-300
        C1 = 0.0 if degenerate else initial_sq / max(denom, 1e-300)
        C2 = 0.0 if degenerate else first_half_sq / max(denom, 1e-300)
        reports.append(ObservabilityReport(i, initial_sq, first_half_sq,
                                           localized, zeta, C1, C2,
                                           degenerate))
    return reports


def _audit_or_abort(ops, p_vals, g, mu, sample):
    """Backward energy inequality, checked on every diagnostic adjoint solve."""
    margin = energy_audit(ops, p_vals, g, mu)
    if margin < -1e-9:
        raise DiagnosticViolation(
            f"adjoint energy inequality violated on sample {sample}: "
            f"margin {margin:.3e}")
    return margin


def _coerce_layers(b, tg, grid):
    if isinstance(b, SpaceTimeField):
        return b.values
    if hasattr(b, "values") and not isinstance(b, np.ndarray):
        b = b.values
    b = np.asarray(b, dtype=float)
    if b.ndim == 0:
        return np.full((tg.steps + 1, grid.n_nodes), float(b))
    if b.ndim == 1:
        return np.tile(b, (tg.steps + 1, 1))
    return b


# ---------------------------------------------------------------------------
# smoothing scan


@dataclass(frozen=True)
class SmoothingScan:
    sizes: tuple
    measures: tuple              # max_k || t_k dY/dt ||_q
    terminal_residuals: tuple    # || Lap a(Y(T)) + f ||_q
    slope: float
    residual_slope: float
    q: float


def rough_profile(grid):
    """Fixed multi-mode profile, unit L2 norm, vanishing on the boundary."""
    lo, hi = grid.domain.bounds[0]
    xh = (grid.nodes[:, 0] - lo) / (hi - lo)
    w = np.zeros(grid.n_nodes)
    for j, c in ((1, 1.0), (3, 0.8), (7, 0.6), (13, 0.45), (19, 0.35)):
        w += c * np.sin(j * np.pi * xh)
    if grid.ndim == 2:
        lo2, hi2 = grid.domain.bounds[1]
        yh = (grid.nodes[:, 1] - lo2) / (hi2 - lo2)
        w *= np.sin(np.pi * yh)
    w[grid.boundary_mask] = 0.0
    return w / lq_norm(w, 2, grid)


def smoothing_scan(model, y_s, f, data_sizes, T_small, q, grid, steps=64,
                   profile=None) -> SmoothingScan:
    """Fit the decay exponent of max_k ||t_k dY/dt||_q against the data size.

    Each run perturbs the stationary state by size * profile and solves the
    uncontrolled equation on (0, T_small); zero measures are excluded from
    the fit.
    """
    ysv = field_values(y_s)
    fv = field_values(f)
    if profile is None:
        profile = rough_profile(grid)
    tg = TimeGrid(T_small, steps)
    L = laplacian(grid)
    a0 = float(model.a(0.0))
    sizes, measures, residuals = [], [], []
    for r in data_sizes:
        y0 = ysv + r * profile
        Y = solve_uncontrolled(model, y0, fv, tg, grid)
        vals = [
            tg.layer_times[k]
            * lq_norm((Y.values[k] - Y.values[k - 1]) / tg.dt, q, grid)
            for k in range(1, tg.steps + 1)
        ]
        m = max(vals)
        res = L.apply_full(model.a(Y.values[-1]) - a0) + fv
        res[grid.boundary_mask] = 0.0
        rq = lq_norm(res, q, grid)
        size = lq_norm(r * profile, 2, grid)
        if m > 0.0 and size > 0.0:
            sizes.append(size)
            measures.append(m)
            residuals.append(rq)
    if len(sizes) < 3:
        raise FitDegenerate(f"only {len(sizes)} usable scan points")
    slope = fit_power_law(sizes, measures)[0]
    res_slope = fit_power_law(sizes, residuals)[0]
    return SmoothingScan(tuple(sizes), tuple(measures), tuple(residuals),
                         slope, res_slope, float(q))


def fit_power_law(xs, ys):
    """Least-squares slope/intercept of log y against log x."""
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    keep = (xs > 0) & (ys > 0)
    if keep.sum() < 3:
        raise FitDegenerate("fewer than 3 positive points")
    coef = np.polyfit(np.log(xs[keep]), np.log(ys[keep]), 1)
    return float(coef[0]), float(coef[1])


# ---------------------------------------------------------------------------
# theorem estimate report


@dataclass(frozen=True)
class EstimateReport:
    control_weighted_sup: float     # ||e^{-s alpha0} u||_inf over midpoints
    state_tq_time_deriv: float      # sup_k || d/dt [t (y - y_s)] ||_q
    state_tq_sup: float             # sup_k || t_k (y - y_s) ||_q
    state_t_grad_sup: float         # sup_k t_k || grad (y - y_s) ||_inf
    terminal_weighted: float        # sup over late midpoints of e^{-s a0}||y - y_s||_q
    state_sup: float                # ||y - y_s||_{L^inf(Q)}
    driver_l2: float                # ||y0 - y_s||_2
    driver_sup: float               # ||y0 - y_s||_inf
    driver_l2_pow: float            # ||y0 - y_s||_2^{2/q}
    q: float

    def as_dict(self):
        return {
            "control_weighted_sup": self.control_weighted_sup,
            "state_tq_time_deriv": self.state_tq_time_deriv,
            "state_tq_sup": self.state_tq_sup,
            "state_t_grad_sup": self.state_t_grad_sup,
            "terminal_weighted": self.terminal_weighted,
            "state_sup": self.state_sup,
            "driver_l2": self.driver_l2,
            "driver_sup": self.driver_sup,
            "driver_l2_pow": self.driver_l2_pow,
            "q": self.q,
        }


def theorem_estimates(y: Trajectory, u: SpaceTimeField, y_s, y0,
                      weights: WeightFields, q=4.0) -> EstimateReport:
    """Left-hand sides of the main controllability estimates on a run.

    Weighted norms are evaluated at the midpoint times (the envelope
    weights are singular at t = 0, T); exponents are clamped like every
    other weight evaluation.
    """
    grid = y.grid
    ysv = field_values(y_s)
    y0v = field_values(y0)
    mids = weights.times
    layer_times = y.state.times
    dt = layer_times[1] - layer_times[0]
    e_neg_sa0 = weights.exp_s_alpha0(-1.0)       # e^{-s alpha0} >= 1

    u_mid = np.abs(u.values[1:]).max(axis=1)
    control_weighted_sup = float((e_neg_sa0 * u_mid).max())

    diff = y.values - ysv[None, :]
    t_arr = layer_times
    tq_sup = max(
        t_arr[k] * lq_norm(diff[k], q, grid) for k in range(len(t_arr)))
    td = [
        lq_norm((t_arr[k] * diff[k] - t_arr[k - 1] * diff[k - 1]) / dt, q, grid)
        for k in range(1, len(t_arr))
    ]
    tq_time_deriv = max(td)
    t_grad = max(
        t_arr[k] * grad_sup_norm(diff[k], grid) for k in range(len(t_arr)))

    T = weights.params.horizon_T
    late = mids >= T / 2.0
    dm = _midpoint_values(diff, layer_times, mids[late])
    terminal_weighted = max(
        float(e_neg_sa0[late][k] * lq_norm(dm[k], q, grid))
        for k in range(late.sum())
    )

    state_sup = float(np.abs(diff).max())
    d0 = y0v - ysv
    driver_l2 = lq_norm(d0, 2, grid)
    return EstimateReport(
        control_weighted_sup=control_weighted_sup,
        state_tq_time_deriv=float(tq_time_deriv),
        state_tq_sup=float(tq_sup),
        state_t_grad_sup=float(t_grad),
        terminal_weighted=float(terminal_weighted),
        state_sup=state_sup,
        driver_l2=driver_l2,
        driver_sup=float(np.abs(d0).max()),
        driver_l2_pow=driver_l2 ** (2.0 / q),
        q=float(q),
    )
