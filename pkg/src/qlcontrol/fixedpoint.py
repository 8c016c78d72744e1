"""Picard outer loop on the linearization point, with membership accounting.

Each outer iteration minimizes the weighted tracking functional at the
current linearization point z_k and feeds the minimizer back as z_{k+1}.
Because the frozen-coefficient step at z equals the quasilinear step when
z is the trajectory itself, a converged loop returns a control whose
re-simulated quasilinear trajectory reproduces the fixed point to solver
precision (the fixed-point certificate).

The two-phase strategy runs the equation freely on [0, T0] to smooth the
initial data, then restarts the controlled problem on [T0, T].
"""

import math
from dataclasses import dataclass

import numpy as np

from .control import build_control_problem, minimize
from .discretize import (
    SpaceTimeField,
    field_values,
    grad_sup_norm,
    lq_norm,
    weighted_spacetime_norm,
)
from .errors import BadExponents, NoConvergence
from .geometry import ControlRegion, Grid
from .solvers import (
    TimeGrid,
    Trajectory,
    solve_quasilinear_controlled,
    solve_uncontrolled,
    sup_distance,
)
from .weights import WeightFunctionPsi, evaluate_weights


@dataclass(frozen=True)
class ProblemGeometry:
    grid: Grid
    region: ControlRegion
    psi: WeightFunctionPsi
    tg: TimeGrid

    def with_time_grid(self, tg):
        return ProblemGeometry(self.grid, self.region, self.psi, tg)


@dataclass(frozen=True)
class QiLadder:
    n_dim: int
    q_final: float
    N: int
    q_values: tuple


def qi_ladder(n_dim, q_final) -> QiLadder:
    """Exponent ladder q_0 = 2, q_i = 2 (n/(n-2))^{i-1}, q_N = q."""
    n_dim = int(n_dim)
    q_final = float(q_final)
    if n_dim < 2:
        raise BadExponents("ladder dimension must be at least 2")
    if q_final <= n_dim:
        raise BadExponents(f"target exponent {q_final} must exceed n = {n_dim}")
    if n_dim == 2:
        N = 1
    else:
        N = math.ceil(
            (math.log(q_final) - math.log(2.0))
            / (math.log(n_dim) - math.log(n_dim - 2.0))
        ) + 1
    qs = [2.0]
    for i in range(1, N):
        qs.append(2.0 * (n_dim / (n_dim - 2.0)) ** (i - 1))
    qs.append(q_final)
    return QiLadder(n_dim, q_final, N, tuple(qs))


@dataclass(frozen=True)
class BMembership:
    zeta_list: tuple
    zeta: float
    ladder_norms: tuple          # measured per-level sums
    dt_norm: float               # ||y_t||_{C([0,T]; L^q)}
    grad_norm: float             # ||grad(y - y_s)||_{L^inf(Q)}
    ladder_pass: tuple
    dt_pass: bool
    grad_pass: bool

    @property
    def passed(self):
        return all(self.ladder_pass) and self.dt_pass and self.grad_pass


def check_membership(y: Trajectory, Y: Trajectory, y_s, weights, params,
                     ladder: QiLadder, zetas=None, zeta=None) -> BMembership:
    """Evaluate every ladder norm and the two auxiliary norms against gates.

    With zetas/zeta omitted, gates default to twice the measured values
    (the recursion constant is replaced by the observed amplification);
    membership is reported, never enforced.
    """
    grid = y.grid
    T = weights.params.horizon_T
    ysv = field_values(y_s)
    diff_Y = SpaceTimeField(grid, y.state.times, y.values - Y.values)
    diff_s = SpaceTimeField(grid, y.state.times, y.values - ysv[None, :])
    s = params.s
    norms = []
    for i in range(ladder.N + 1):
        qt, qx = ladder.q_values[i], ladder.q_values[min(i + 1, ladder.N)]
        first = weighted_spacetime_norm(diff_Y, weights, s, i, qt, qx,
                                        t_window=(0.0, T / 2.0))
        second = weighted_spacetime_norm(diff_s, weights, s, i, qt, qx,
                                         t_window=(T / 2.0, T))
        norms.append(first + second)
    dt = y.state.times[1] - y.state.times[0]
    q = ladder.q_final
    dt_norm = max(
        lq_norm((y.values[k] - y.values[k - 1]) / dt, q, grid)
        for k in range(1, len(y.state.times))
    )
    grad_norm = max(
        grad_sup_norm(y.values[k] - ysv, grid) for k in range(len(y.state.times))
    )
    if zetas is None:
        zetas = tuple(2.0 * v for v in norms)
    if zeta is None:
        zeta = 2.0 * max(dt_norm, grad_norm)
    ladder_pass = tuple(v <= z for v, z in zip(norms, zetas))
    return BMembership(tuple(zetas), float(zeta), tuple(norms), dt_norm,
                       grad_norm, ladder_pass, dt_norm <= zeta,
                       grad_norm <= zeta)


@dataclass(frozen=True)
class PicardState:
    iteration: int
    z: Trajectory
    y: Trajectory
    u: SpaceTimeField
    sup_dist: float
    terminal_error: float
    membership: BMembership
    converged: bool
    trace: list
    certificate_deviation: float
    opt_state: object = None


@dataclass(frozen=True)
class TwoPhasePlan:
    T0: float
    free_phase: Trajectory          # may span zero steps
    control_state: PicardState
    y: Trajectory                   # concatenated on the full grid
    u: SpaceTimeField               # zero on [0, T0]
    terminal_error: float


def picard_run(model, y0, f, geom: ProblemGeometry, params, ladder=None,
               zetas=None, max_outer=15, tol_sup=1e-8, y_s=None,
               grad_rtol=1e-9, terminal_tol=None, max_cg=2000,
               raise_on_stall=True) -> PicardState:
    """z_0 = Y; iterate y_{k+1} = argmin Q_{z_k}, z_{k+1} = y_{k+1}.

    Stops when the sup distance between the minimizer and its
    linearization point drops below tol_sup (iteration indices are
    0-based, so a z-independent problem converges at iteration 1 and
    y0 = y_s converges at iteration 0).
    """
    grid, tg = geom.grid, geom.tg
    y0v = field_values(y0)
    fv = field_values(f) if f is not None else np.zeros(grid.n_nodes)
    if y_s is None:
        from .nonlinearity import solve_stationary
        y_s = solve_stationary(model, fv, grid).y_s
    ysv = field_values(y_s)
    if ladder is None:
        ladder = qi_ladder(max(grid.ndim, 2), 2.0 * max(grid.ndim, 2))

    Y = solve_uncontrolled(model, y0v, fv, tg, grid)
    z = Y
    trace = []
    state = None
    converged = False
    last = None
    for k in range(max_outer + 1):
        prob = build_control_problem(model, grid, tg, geom.region, geom.psi,
                                     params, y0v, fv, ysv, Y=Y, z=z)
        st = minimize(prob, grad_rtol=grad_rtol, max_iter=max_cg,
                      terminal_tol=terminal_tol)
        dist = sup_distance(st.y.values, z.values)
        trace.append({
            "iteration": k,
            "sup_distance": dist,
            "functional": st.functional_value,
            "gradient_norm": st.gradient_norm,
            "terminal_error": st.terminal_error,
            "cg_iterations": st.cg_iterations,
        })
        last = (st, dist)
        z = st.y
        if dist <= tol_sup:
            converged = True
            break

    st, dist = last
    weights = evaluate_weights(geom.psi, params.with_horizon(tg.T),
                               tg.midpoints)
    membership = check_membership(st.y, Y, ysv, weights, params, ladder,
                                  zetas)
    resim = solve_quasilinear_controlled(model, st.u, y0v, fv, tg, grid,
                                         geom.region)
    cert = sup_distance(resim.values, st.y.values)
    state = PicardState(
        iteration=k,
        z=z,
        y=st.y,
        u=st.u,
        sup_dist=dist,
        terminal_error=st.terminal_error,
        membership=membership,
        converged=converged,
        trace=trace,
        certificate_deviation=cert,
        opt_state=st,
    )
    if not converged and raise_on_stall:
        raise NoConvergence(
            f"picard loop stalled at sup distance {dist:.3e} after "
            f"{max_outer} iterations", state=state)
    return state


def two_phase_run(model, y0, f, geom: ProblemGeometry, params,
                  T0_fraction=0.25, y_s=None, **picard_kwargs) -> TwoPhasePlan:
    """Free evolution on [0, T0], then the Picard-controlled run on [T0, T].

    T0 snaps to a time-grid layer (keeping the controlled phase even in
    step count); T0_fraction -> 0 reduces to a plain picard run.
    """
    grid, tg = geom.grid, geom.tg
    if not 0.0 <= T0_fraction < 1.0:
        raise ValueError("T0_fraction must be in [0, 1)")
    y0v = field_values(y0)
    fv = field_values(f) if f is not None else np.zeros(grid.n_nodes)

    k0 = int(round(T0_fraction * tg.steps))
    if (tg.steps - k0) % 2:
        k0 += 1
    if k0 == 0:
        state = picard_run(model, y0v, fv, geom, params, y_s=y_s,
                           **picard_kwargs)
        free = Trajectory(SpaceTimeField(grid, np.array([0.0]),
                                         y0v[None, :].copy()))
        return TwoPhasePlan(0.0, free, state, state.y, state.u,
                            state.terminal_error)

    T0 = k0 * tg.dt
    tg1 = TimeGrid(T0, k0) if k0 >= 16 else None
    if tg1 is not None:
        free = solve_uncontrolled(model, y0v, fv, tg1, grid)
    else:
        # short free phases reuse the marching core through a padded grid
        tg_pad = TimeGrid(16 * tg.dt, 16)
        padded = solve_uncontrolled(model, y0v, fv, tg_pad, grid)
        free = Trajectory(SpaceTimeField(grid, padded.state.times[: k0 + 1],
                                         padded.values[: k0 + 1].copy()),
                          padded.newton_iterations[:k0],
                          padded.residuals[:k0])
    tg2 = TimeGrid(tg.T - T0, tg.steps - k0)
    state = picard_run(model, free.values[k0], fv, geom.with_time_grid(tg2),
                       params.with_horizon(tg2.T), y_s=y_s, **picard_kwargs)

    times = tg.layer_times
    y_full = np.vstack([free.values[: k0], state.y.values])
    u_full = np.vstack([np.zeros((k0, grid.n_nodes)), state.u.values])
    plan = TwoPhasePlan(
        T0=T0,
        free_phase=free,
        control_state=state,
        y=Trajectory(SpaceTimeField(grid, times, y_full)),
        u=SpaceTimeField(grid, times, u_full),
        terminal_error=state.terminal_error,
    )
    return plan
