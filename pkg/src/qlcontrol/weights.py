"""Auxiliary function psi and the Carleman weight fields alpha, phi.

The weights are

    alpha(x, t) = (e^{lam*psi(x)} - e^{2*lam*||psi||}) / (t(T - t)),
    phi(x, t)   = e^{lam*psi(x)} / (t(T - t)),

together with the space-independent envelopes

    alpha0(t) = (1 - e^{2*lam*||psi||}) / (t(T - t)),
    phi0(t)   = 1 / (t(T - t)).

psi is positive inside the domain, zero on the boundary, and its gradient
vanishes only inside the inner control region omega0.  Two closed-form
constructions are provided: sine products when omega0 contains the domain
center, and (1D only) a C^2 piecewise cubic with its single maximum at the
omega0 midpoint.
"""

import csv
from dataclasses import dataclass

import numpy as np

from .errors import RegionUnsupported, TimeNodeOnBoundary
from .geometry import ControlRegion, Grid

#: exponent arguments are clipped to +/- this value before exponentiation
CLAMP_EXPONENT = 700.0


@dataclass(frozen=True)
class WeightFunctionPsi:
    """psi tabulated on the grid, with its analytic gradient."""

    grid: Grid
    values: np.ndarray          # (n_nodes,)
    grad: np.ndarray            # (n_nodes, ndim)
    sup_norm: float
    description: str = ""

    def grad_norm(self):
        return np.sqrt((self.grad ** 2).sum(axis=1))


@dataclass(frozen=True)
class CarlemanParameters:
    """Weight parameters (lam, s) and the time horizon."""

    lam: float
    s: float
    horizon_T: float
    sup_norm: float
    proof_regime: bool = False

    def __post_init__(self):
        # lam = 0 is admitted as the degenerate limit (eta = gamma = 1)
        if self.lam < 0 or self.s <= 0 or self.horizon_T <= 0:
            raise ValueError("lam must be >= 0; s, horizon_T must be positive")
        if self.proof_regime and self.s < self.gamma:
            raise ValueError(
                f"proof-regime requires s >= gamma = {self.gamma:.6g}, got s = {self.s}"
            )

    @property
    def eta(self):
        return float(np.exp(-self.lam * self.sup_norm))

    @property
    def gamma(self):
        # defined through eta so that gamma == eta**-2 holds exactly
        return self.eta ** -2.0

    def with_horizon(self, T):
        return CarlemanParameters(self.lam, self.s, T, self.sup_norm, self.proof_regime)

    def with_s(self, s):
        return CarlemanParameters(self.lam, s, self.horizon_T, self.sup_norm, self.proof_regime)


@dataclass(frozen=True)
class WeightFields:
    """alpha, phi and their envelopes tabulated at interior time nodes."""

    times: np.ndarray           # (nt,), strictly inside (0, T)
    alpha: np.ndarray           # (nt, n_nodes)
    phi: np.ndarray             # (nt, n_nodes)
    alpha0: np.ndarray          # (nt,)
    phi0: np.ndarray            # (nt,)
    params: CarlemanParameters
    clamp_exponent: float = CLAMP_EXPONENT
    e_lam_psi: np.ndarray = None   # exp(lam * psi) per node
    e_lam_sup: float = 0.0         # exp(lam * sup_norm)

    def exp_s_alpha(self, factor):
        """e^{factor * s * alpha}, exponent clipped to +/- clamp_exponent."""
        arg = factor * self.params.s * self.alpha
        return np.exp(np.clip(arg, -self.clamp_exponent, self.clamp_exponent))

    def exp_s_alpha0(self, factor):
        arg = factor * self.params.s * self.alpha0
        return np.exp(np.clip(arg, -self.clamp_exponent, self.clamp_exponent))

    def saturated_mask(self, factor):
        """Time-node mask where some clipped exponent hit the clamp."""
        arg = factor * self.params.s * self.alpha
        return (np.abs(arg) >= self.clamp_exponent).any(axis=1)


def _normalized(x, lo, hi):
    return (x - lo) / (hi - lo)


def _psi_sine_1d(grid):
    lo, hi = grid.domain.bounds[0]
    L = hi - lo
    xh = _normalized(grid.nodes[:, 0], lo, hi)
    values = np.sin(np.pi * xh)
    grad = (np.pi / L) * np.cos(np.pi * xh)
    return values, grad[:, None], "sin(pi x)"


def _psi_cubic_1d(grid, xstar_hat):
    """C^2 bump 1 - (1 - u)^3 on each side of the maximum at xstar_hat.

    Value, slope and curvature match at the junction (the one-sided second
    derivatives are both zero), so the blend is C^2 with a single interior
    critical point.
    """
    lo, hi = grid.domain.bounds[0]
    L = hi - lo
    xh = _normalized(grid.nodes[:, 0], lo, hi)
    left = xh <= xstar_hat
    u = np.where(left, xh / xstar_hat, (1.0 - xh) / (1.0 - xstar_hat))
    du = np.where(left, 1.0 / xstar_hat, -1.0 / (1.0 - xstar_hat)) / L
    values = 1.0 - (1.0 - u) ** 3
    grad = 3.0 * (1.0 - u) ** 2 * du
    return values, grad[:, None], f"piecewise cubic bump, max at x_hat={xstar_hat:.6g}"


def _psi_sine_2d(grid):
    values = np.ones(grid.n_nodes)
    grad = np.zeros((grid.n_nodes, 2))
    sines = []
    for axis in range(2):
        lo, hi = grid.domain.bounds[axis]
        xh = _normalized(grid.nodes[:, axis], lo, hi)
        sines.append((np.sin(np.pi * xh), np.pi * np.cos(np.pi * xh) / (hi - lo)))
    values = sines[0][0] * sines[1][0]
    grad[:, 0] = sines[0][1] * sines[1][0]
    grad[:, 1] = sines[0][0] * sines[1][1]
    return values, grad, "sin(pi x) sin(pi y)"


def construct_psi(grid, region: ControlRegion) -> WeightFunctionPsi:
    """Build psi > 0 on the interior with |grad psi| > 0 outside omega0.

    Centered omega0 gets the sine product; an off-center omega0 is handled
    by a piecewise-cubic bump in 1D and rejected in 2D.
    """
    dom = grid.domain
    center = tuple(0.5 * (lo + hi) for lo, hi in dom.bounds)
    centered = all(
        ilo < c < ihi for c, (ilo, ihi) in zip(center, region.omega0)
    )
    if dom.ndim == 1:
        if centered:
            values, grad, desc = _psi_sine_1d(grid)
        else:
            lo, hi = dom.bounds[0]
            ilo, ihi = region.omega0[0]
            xstar_hat = _normalized(0.5 * (ilo + ihi), lo, hi)
            if not 0.0 < xstar_hat < 1.0:
                raise RegionUnsupported("omega0 midpoint is not interior")
            values, grad, desc = _psi_cubic_1d(grid, xstar_hat)
    else:
        if not centered:
            raise RegionUnsupported(
                "2D psi construction requires omega0 to contain the domain center"
            )
        values, grad, desc = _psi_sine_2d(grid)

    values = values.copy()
    values[grid.boundary_mask] = 0.0  # exact zeros on the boundary node set
    return WeightFunctionPsi(grid, values, grad, float(values.max()), desc)


def evaluate_weights(psi: WeightFunctionPsi, params: CarlemanParameters,
                     time_nodes) -> WeightFields:
    """Tabulate alpha, phi, alpha0, phi0 at the given interior time nodes."""
    t = np.asarray(time_nodes, dtype=float)
    T = params.horizon_T
    if np.any(t <= 0.0) or np.any(t >= T):
        raise TimeNodeOnBoundary("weight evaluation requires 0 < t < T")
    denom = (t * (T - t))[:, None]
    e_lam_psi = np.exp(params.lam * psi.values)
    e_lam_sup = float(np.exp(params.lam * params.sup_norm))
    # gamma as the square of e^{lam sup}: keeps the envelope bounds exact
    # in floating point (see weight_bound_margins)
    e_2lam_sup = e_lam_sup * e_lam_sup
    alpha = (e_lam_psi[None, :] - e_2lam_sup) / denom
    phi = e_lam_psi[None, :] / denom
    alpha0 = (1.0 - e_2lam_sup) / denom[:, 0]
    phi0 = 1.0 / denom[:, 0]
    return WeightFields(t, alpha, phi, alpha0, phi0, params,
                        e_lam_psi=e_lam_psi, e_lam_sup=e_lam_sup)


def weight_bound_margins(fields: WeightFields):
    """Slack in the envelope bounds, computed so that exact zero is attainable.

    All four inequalities share the positive factor 1/(t(T-t)); comparing
    the numerators makes the checks independent of per-node rounding of the
    division.  Returned margins are >= 0 iff the bounds hold:

      lower:       e^{lam psi} >= 1          (alpha >= alpha0, phi >= phi0)
      upper_phi:   e^{lam psi} <= e^{lam sup}        (phi <= phi0 / eta)
      upper_alpha: e^{lam psi} - gamma <= (1 - gamma)(1 - eta)
    """
    E = fields.e_lam_psi
    Esup = fields.e_lam_sup
    gamma = Esup * Esup
    eta = 1.0 / Esup
    lower = float(E.min()) - 1.0
    upper_phi = Esup - float(E.max())
    upper_alpha = (1.0 - gamma) * (1.0 - eta) - (float(E.max()) - gamma)
    return {"lower": lower, "upper_phi": upper_phi,
            "upper_alpha": upper_alpha}


@dataclass(frozen=True)
class PsiReport:
    min_interior_value: float
    min_grad_outside_omega0: float
    max_boundary_abs: float

    @property
    def passed(self):
        return (
            self.min_interior_value > 0.0
            and self.min_grad_outside_omega0 > 0.0
            and self.max_boundary_abs == 0.0
        )


def verify_psi(psi: WeightFunctionPsi, region: ControlRegion) -> PsiReport:
    """Report-only check of the psi invariants on the grid."""
    grid = psi.grid
    interior = grid.interior_mask
    outside0 = interior & ~region.omega0_mask
    gnorm = psi.grad_norm()
    return PsiReport(
        min_interior_value=float(psi.values[interior].min()) if interior.any() else 0.0,
        min_grad_outside_omega0=float(gnorm[outside0].min()) if outside0.any() else np.inf,
        max_boundary_abs=float(np.abs(psi.values[grid.boundary_mask]).max()),
    )


def export_weights_csv(fields: WeightFields, grid: Grid, path):
    """Write t, x[, y], alpha, phi, alpha0, phi0 rows for external plotting."""
    headers = ["t", "x"] + (["y"] if grid.ndim == 2 else []) + [
        "alpha", "phi", "alpha0", "phi0",
    ]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(headers)
        for k, t in enumerate(fields.times):
            for j in range(grid.n_nodes):
                row = [f"{t:.17g}"]
                row += [f"{c:.17g}" for c in grid.nodes[j]]
                row += [
                    f"{fields.alpha[k, j]:.17g}",
                    f"{fields.phi[k, j]:.17g}",
                    f"{fields.alpha0[k]:.17g}",
                    f"{fields.phi0[k]:.17g}",
                ]
                writer.writerow(row)
