"""Experiment runner: stationary solve -> weights -> two-phase fixed point ->
diagnostics, with all artifacts written under one output directory.

Outputs per run: report.txt (the run report, deterministic for a fixed
config and seed), trace.csv (outer-iteration trace), convergence.csv
(inner CG history), weights.csv, trajectory binaries with a manifest,
and rendered figures.  Exit codes: 0 success, 2 config error, 3 solver
failure, 4 diagnostic violation.
"""

import csv
import hashlib
import os
from dataclasses import dataclass

import numpy as np

from . import figures as figmod
from .config import ExperimentSetup, build_setup, load_config
from .diagnostics import (
    carleman_check,
    observability_check,
    rough_profile,
    smoothing_scan,
    theorem_estimates,
)
from .discretize import (
    export_field_csv,
    export_spacetime_csv,
    lq_norm,
    save_array_bin,
)
from .errors import (
    ConfigInvalid,
    DiagnosticViolation,
    NoConvergence,
    QLControlError,
)
from .fixedpoint import ProblemGeometry, picard_run, qi_ladder, two_phase_run
from .nonlinearity import manufactured_forcing, solve_stationary
from .solvers import solve_uncontrolled
from .weights import (
    CarlemanParameters,
    construct_psi,
    evaluate_weights,
    export_weights_csv,
    weight_bound_margins,
)

_ENERGY_SLACK = 1e-9


@dataclass
class ExperimentResult:
    exit_code: int
    out_dir: str
    report_path: str
    summary: dict


def _fmt(x):
    if isinstance(x, float):
        return f"{x:.17g}"
    return str(x)


def _sine_profile(grid):
    prof = np.ones(grid.n_nodes)
    for axis in range(grid.ndim):
        lo, hi = grid.domain.bounds[axis]
        prof = prof * np.sin(np.pi * (grid.nodes[:, axis] - lo) / (hi - lo))
    prof[grid.boundary_mask] = 0.0
    return prof / lq_norm(prof, 2, grid)


def initial_profile(grid, name):
    return _sine_profile(grid) if name == "sine" else rough_profile(grid)


def run_experiment(config_path, out_dir=None, seed=None, figures=None):
    """Execute the configured pipeline; returns an ExperimentResult."""
    try:
        cfg = load_config(config_path, seed_override=seed)
        setup = build_setup(cfg)
    except ConfigInvalid as exc:
        return ExperimentResult(2, out_dir or "", "", {"error": str(exc)})

    if out_dir is None:
        out_dir = os.path.join("runs", os.path.splitext(
            os.path.basename(str(config_path)))[0])
    os.makedirs(out_dir, exist_ok=True)
    if figures is not None:
        setup.options["figures"] = bool(figures)

    try:
        summary = _execute(setup, out_dir)
        code = 0
    except DiagnosticViolation as exc:
        summary = {"error": f"diagnostic violation: {exc}"}
        code = 4
    except (QLControlError, np.linalg.LinAlgError) as exc:
        summary = {"error": f"{type(exc).__name__}: {exc}"}
        code = 3
        if isinstance(exc, NoConvergence) and exc.state is not None:
            summary["sup_distance"] = exc.state.sup_dist
    report_path = os.path.join(out_dir, "report.txt")
    if code != 0:
        _write_failure_report(report_path, setup, code, summary)
    return ExperimentResult(code, out_dir, report_path, summary)


def _execute(setup: ExperimentSetup, out_dir):
    cfg = setup.config
    grid, tg, region, model = setup.grid, setup.tg, setup.region, setup.model
    opts = setup.options
    rng_seed = cfg.seed

    # stationary state and forcing
    ys = opts["stationary_amplitude"] * _sine_profile(grid)
    f = manufactured_forcing(model, ys, grid).values
    stat = solve_stationary(model, f, grid)

    # weights
    psi = construct_psi(grid, region)
    params = CarlemanParameters(setup.lam, setup.s, tg.T, psi.sup_norm,
                                setup.proof_regime)
    weights = evaluate_weights(psi, params, tg.midpoints)
    bound_margin = min(weight_bound_margins(weights).values())

    # initial data
    prof = initial_profile(grid, opts["profile"])
    y0 = ys + opts["scale"] * prof
    driver_l2 = lq_norm(y0 - ys, 2, grid)

    geom = ProblemGeometry(grid, region, psi, tg)
    ladder = qi_ladder(opts["ladder_n"], opts["ladder_q"])
    terminal_tol = opts["terminal_tol_rel"] * max(driver_l2, 1e-300)

    summary = {
        "seed": rng_seed,
        "stationary_residual": stat.residual_norm,
        "weight_bound_margin": bound_margin,
        "driver_l2": driver_l2,
    }

    trace = []
    plan = None
    state = None
    if setup.run_kind == "uncontrolled":
        Y = solve_uncontrolled(model, y0, f, tg, grid)
        y_final, u_final = Y, None
        summary["terminal_error"] = lq_norm(Y.values[-1] - ys, 2, grid)
    else:
        kwargs = dict(
            ladder=ladder,
            max_outer=opts["max_outer"],
            tol_sup=opts["tol_sup"],
            grad_rtol=opts["grad_rtol"],
            max_cg=opts["max_cg"],
            terminal_tol=terminal_tol,
            y_s=ys,
        )
        if setup.run_kind == "two_phase":
            plan = two_phase_run(model, y0, f, geom, params,
                                 T0_fraction=opts["T0_fraction"], **kwargs)
            state = plan.control_state
            y_final, u_final = plan.y, plan.u
        else:
            state = picard_run(model, y0, f, geom, params, **kwargs)
            y_final, u_final = state.y, state.u
        trace = state.trace
        summary.update({
            "outer_iterations": state.iteration,
            "sup_distance": state.sup_dist,
            "terminal_error": lq_norm(y_final.values[-1] - ys, 2, grid),
            "certificate_deviation": state.certificate_deviation,
            "pontryagin_residual": state.opt_state.pontryagin_residual,
            "cg_iterations": state.opt_state.cg_iterations,
            "saturated_residual": state.opt_state.saturated_residual,
        })

    # estimates on the full horizon
    estimates = None
    if u_final is not None:
        estimates = theorem_estimates(y_final, u_final, ys, y0, weights,
                                      q=opts["estimate_q"])
        summary["terminal_error_rel"] = summary["terminal_error"] / max(
            driver_l2, 1e-300)

    # energy audit of the final control adjoint (with its actual source)
    if state is not None:
        margin = state.opt_state.energy_margin
        summary["energy_audit_margin"] = margin
        if margin < -_ENERGY_SLACK:
            raise DiagnosticViolation(
                f"adjoint energy inequality violated, margin {margin:.3e}")

    # sampling diagnostics
    car_reports, obs_reports = [], []
    if opts["carleman_samples"] > 0:
        car_reports = carleman_check(
            np.ones(grid.n_nodes), opts["carleman_samples"], params, weights,
            geom, seed=rng_seed)
        summary["carleman_C_max"] = max(
            (r.empirical_C for r in car_reports if not r.degenerate),
            default=0.0)
    if opts["observability_samples"] > 0:
        obs_reports = observability_check(
            np.ones(grid.n_nodes), opts["observability_samples"], params,
            weights, geom, seed=rng_seed)
        summary["observability_C_max"] = max(
            (r.C_initial for r in obs_reports if not r.degenerate),
            default=0.0)
    scan = None
    if opts["smoothing"]:
        sizes = [10.0 ** (-1 - 0.25 * i) for i in range(9)]
        scan = smoothing_scan(model, ys, f, sizes, T_small=0.1,
                              q=opts["estimate_q"], grid=grid, steps=64)
        summary["smoothing_slope"] = scan.slope

    # ---- artifacts
    _write_trace_csv(os.path.join(out_dir, "trace.csv"), trace, state)
    if state is not None and state.opt_state.history:
        _write_history_csv(os.path.join(out_dir, "convergence.csv"),
                           state.opt_state.history)
    export_weights_csv(weights, grid, os.path.join(out_dir, "weights.csv"))
    if opts["export_trajectories"]:
        _export_run(out_dir, setup, y_final, u_final, ys, y0, f,
                    state)
    report_path = os.path.join(out_dir, "report.txt")
    _write_report(report_path, setup, summary, estimates, state, car_reports,
                  obs_reports, scan)
    if opts["figures"]:
        figmod.render_run_figures(out_dir, grid, tg, y_final, u_final, ys,
                                  weights, trace, state)
    summary["report_sha256"] = _sha256(report_path)
    return summary


def _export_run(out_dir, setup, y_final, u_final, ys, y0, f, state):
    grid = setup.grid
    save_array_bin(os.path.join(out_dir, "y.bin"), y_final.values)
    if u_final is not None:
        save_array_bin(os.path.join(out_dir, "u.bin"), u_final.values)
    if state is not None:
        save_array_bin(os.path.join(out_dir, "p.bin"),
                       state.opt_state.p.values)
    save_array_bin(os.path.join(out_dir, "y_s.bin"), ys)
    save_array_bin(os.path.join(out_dir, "y0.bin"), y0)
    save_array_bin(os.path.join(out_dir, "f.bin"), f)
    export_field_csv(os.path.join(out_dir, "y_s.csv"), grid, ys, "y_s")
    export_spacetime_csv(os.path.join(out_dir, "y.csv"), y_final.state, "y")
    if u_final is not None:
        export_spacetime_csv(os.path.join(out_dir, "u.csv"), u_final, "u")
    if state is not None:
        export_spacetime_csv(os.path.join(out_dir, "p.csv"),
                             state.opt_state.p.state, "p")
    with open(os.path.join(out_dir, "manifest.txt"), "w") as fh:
        fh.write("[artifact]\nlayout = rank,dims,row-major float64 LE\n\n")
        fh.write(setup.config.text())


def _write_trace_csv(path, trace, state):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        header = ["iteration", "sup_distance", "functional", "gradient_norm",
                  "terminal_error", "cg_iterations"]
        if state is not None:
            header += [f"ladder_norm_{i}"
                       for i in range(len(state.membership.ladder_norms))]
            header += ["dt_norm", "grad_norm"]
        writer.writerow(header)
        for row in trace:
            out = [_fmt(row[k]) for k in ("iteration", "sup_distance",
                                          "functional", "gradient_norm",
                                          "terminal_error", "cg_iterations")]
            if state is not None and row is trace[-1]:
                out += [_fmt(v) for v in state.membership.ladder_norms]
                out += [_fmt(state.membership.dt_norm),
                        _fmt(state.membership.grad_norm)]
            elif state is not None:
                out += [""] * (len(state.membership.ladder_norms) + 2)
            writer.writerow(out)


def _write_history_csv(path, history):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "functional", "gradient_norm"])
        for it, jval, g in history:
            writer.writerow([it, _fmt(jval), _fmt(g)])


def _write_report(path, setup, summary, estimates, state, car_reports,
                  obs_reports, scan):
    lines = ["[run]"]
    lines.append(f"kind = {setup.run_kind}")
    lines.append(f"seed = {setup.config.seed}")
    lines.append("")
    lines.append("[config]")
    for ln in setup.config.text().splitlines():
        lines.append(f"  {ln}")
    lines.append("[results]")
    for key in sorted(summary):
        if key == "report_sha256":
            continue
        lines.append(f"{key} = {_fmt(summary[key])}")
    lines.append("")
    if estimates is not None:
        lines.append("[estimates]")
        for key, val in estimates.as_dict().items():
            lines.append(f"{key} = {_fmt(val)}")
        lines.append("")
    if state is not None:
        mem = state.membership
        lines.append("[membership]")
        for i, (v, z, ok) in enumerate(zip(mem.ladder_norms, mem.zeta_list,
                                           mem.ladder_pass)):
            lines.append(f"ladder_{i} = {_fmt(v)} gate {_fmt(z)} pass {ok}")
        lines.append(f"dt_norm = {_fmt(mem.dt_norm)} pass {mem.dt_pass}")
        lines.append(f"grad_norm = {_fmt(mem.grad_norm)} pass {mem.grad_pass}")
        lines.append("")
    if car_reports:
        lines.append("[carleman]")
        for r in car_reports:
            lines.append(
                f"sample_{r.sample} = lhs {_fmt(r.lhs)} rhs_control "
                f"{_fmt(r.rhs_control)} rhs_source {_fmt(r.rhs_source)} "
                f"C {_fmt(r.empirical_C)} degenerate {r.degenerate}")
        lines.append("")
    if obs_reports:
        lines.append("[observability]")
        for r in obs_reports:
            lines.append(
                f"sample_{r.sample} = C_initial {_fmt(r.C_initial)} "
                f"C_first_half {_fmt(r.C_first_half)} degenerate {r.degenerate}")
        lines.append("")
    if scan is not None:
        lines.append("[smoothing]")
        lines.append(f"slope = {_fmt(scan.slope)}")
        lines.append(f"residual_slope = {_fmt(scan.residual_slope)}")
        for sz, m, res in zip(scan.sizes, scan.measures,
                              scan.terminal_residuals):
            lines.append(f"point = {_fmt(sz)} {_fmt(m)} {_fmt(res)}")
        lines.append("")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def _write_failure_report(path, setup, code, summary):
    lines = ["[run]", f"kind = {setup.run_kind}", f"exit_code = {code}", ""]
    lines.append("[error]")
    for key in sorted(summary):
        lines.append(f"{key} = {summary[key]}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        h.update(fh.read())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# sweeps


def run_sweep(config_path, overrides, out_dir, seed=None, threads=1,
              figures=False):
    """Cartesian sweep over {section.key: [values]} with per-point run dirs.

    Returns (exit_code, rows); rows collect per-point summaries.
    """
    import itertools
    from concurrent.futures import ProcessPoolExecutor

    base = load_config(config_path, seed_override=seed)
    axes = sorted(overrides)
    values = [overrides[a] for a in axes]
    points = list(itertools.product(*values))
    os.makedirs(out_dir, exist_ok=True)
    jobs = []
    for idx, point in enumerate(points):
        raw = {s: dict(d) for s, d in base.raw.items()}
        for axis, val in zip(axes, point):
            section, key = axis.split(".", 1)
            raw.setdefault(section, {})[key] = str(val)
        jobs.append((raw, base.seed, os.path.join(out_dir, f"point_{idx:03d}"),
                     figures, dict(zip(axes, point))))

    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(_sweep_point, jobs))
    else:
        rows = [_sweep_point(j) for j in jobs]

    summary_path = os.path.join(out_dir, "sweep_summary.csv")
    keys = sorted({k for row in rows for k in row})
    with open(summary_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(keys)
        for row in rows:
            writer.writerow([_fmt(row.get(k, "")) for k in keys])
    code = max((row.get("exit_code", 0) for row in rows), default=0)
    return code, rows


def _sweep_point(job):
    raw, seed, point_dir, figures, point = job
    os.makedirs(point_dir, exist_ok=True)
    cfg_path = os.path.join(point_dir, "config.cfg")
    with open(cfg_path, "w") as fh:
        for section in sorted(raw):
            fh.write(f"[{section}]\n")
            for key in sorted(raw[section]):
                fh.write(f"{key} = {raw[section][key]}\n")
            fh.write("\n")
    res = run_experiment(cfg_path, out_dir=point_dir, seed=seed,
                         figures=figures)
    row = {f"axis:{k}": v for k, v in point.items()}
    row["exit_code"] = res.exit_code
    row["out_dir"] = res.out_dir
    for key, val in res.summary.items():
        if isinstance(val, (int, float, str)):
            row[key] = val
    return row
