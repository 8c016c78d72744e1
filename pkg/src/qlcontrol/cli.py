"""Command-line interface: run, sweep, check, export.

Exit codes: 0 success, 2 config error, 3 solver failure, 4 diagnostic
violation.
"""

import argparse
import csv
import os
import sys

import numpy as np

from .config import build_setup, load_config
from .diagnostics import carleman_check, observability_check, smoothing_scan
from .discretize import load_array_bin
from .errors import ConfigInvalid, QLControlError
from .experiment import run_experiment, run_sweep, _fmt
from .fixedpoint import ProblemGeometry
from .nonlinearity import manufactured_forcing
from .weights import CarlemanParameters, construct_psi, evaluate_weights


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="qlcontrol",
        description="local exact control synthesis for quasilinear diffusion",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute a configured experiment")
    p_run.add_argument("config")
    p_run.add_argument("--seed", type=int, default=None)
    p_run.add_argument("--out", default=None)
    p_run.add_argument("--no-figures", action="store_true")

    p_sweep = sub.add_parser("sweep", help="run a config over axis overrides")
    p_sweep.add_argument("config")
    p_sweep.add_argument("--set", action="append", default=[],
                         metavar="SECTION.KEY=V1,V2,...",
                         help="axis override; repeatable")
    p_sweep.add_argument("--seed", type=int, default=None)
    p_sweep.add_argument("--out", default="sweep_out")
    p_sweep.add_argument("--threads", type=int, default=1)

    p_check = sub.add_parser("check", help="run a named diagnostic")
    p_check.add_argument("name",
                         choices=["carleman", "observability", "smoothing"])
    p_check.add_argument("config")
    p_check.add_argument("--samples", type=int, default=20)
    p_check.add_argument("--seed", type=int, default=None)
    p_check.add_argument("--out", default=None)

    p_export = sub.add_parser("export", help="convert a field binary to CSV")
    p_export.add_argument("binary")
    p_export.add_argument("--out", default=None)

    args = parser.parse_args(argv)
    try:
        if args.command == "run":
            return _cmd_run(args)
        if args.command == "sweep":
            return _cmd_sweep(args)
        if args.command == "check":
            return _cmd_check(args)
        if args.command == "export":
            return _cmd_export(args)
    except ConfigInvalid as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except QLControlError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    return 0


def _cmd_run(args):
    res = run_experiment(args.config, out_dir=args.out, seed=args.seed,
                         figures=not args.no_figures)
    if res.exit_code == 0:
        print(f"run complete: {res.out_dir}")
        for key in ("terminal_error", "terminal_error_rel", "sup_distance",
                    "outer_iterations", "report_sha256"):
            if key in res.summary:
                print(f"  {key} = {res.summary[key]}")
    else:
        print(f"run failed with exit code {res.exit_code}: "
              f"{res.summary.get('error', '')}", file=sys.stderr)
    return res.exit_code


def _parse_overrides(pairs):
    overrides = {}
    for item in pairs:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigInvalid("sweep.set",
                                f"expected SECTION.KEY=V1,V2 got {item!r}")
        key, vals = item.split("=", 1)
        overrides[key.strip()] = [v.strip() for v in vals.split(",") if v.strip()]
    if not overrides:
        raise ConfigInvalid("sweep.set", "no axes given")
    return overrides


def _cmd_sweep(args):
    overrides = _parse_overrides(args.set)
    code, rows = run_sweep(args.config, overrides, args.out, seed=args.seed,
                           threads=args.threads)
    print(f"sweep complete: {len(rows)} points, worst exit code {code}")
    print(f"  summary: {os.path.join(args.out, 'sweep_summary.csv')}")
    return code


def _check_setup(args):
    cfg = load_config(args.config, seed_override=args.seed)
    setup = build_setup(cfg)
    psi = construct_psi(setup.grid, setup.region)
    params = CarlemanParameters(setup.lam, setup.s, setup.tg.T, psi.sup_norm,
                                setup.proof_regime)
    weights = evaluate_weights(psi, params, setup.tg.midpoints)
    geom = ProblemGeometry(setup.grid, setup.region, psi, setup.tg)
    return cfg, setup, params, weights, geom


def _cmd_check(args):
    cfg, setup, params, weights, geom = _check_setup(args)
    out = args.out or f"check_{args.name}.csv"
    b = np.ones(setup.grid.n_nodes)
    if args.name == "carleman":
        reports = carleman_check(b, args.samples, params, weights, geom,
                                 seed=cfg.seed)
        rows = [(r.sample, r.lhs, r.rhs_control, r.rhs_source, r.zeta,
                 r.empirical_C, r.degenerate) for r in reports]
        head = ["sample", "lhs", "rhs_control", "rhs_source", "zeta",
                "empirical_C", "degenerate"]
        worst = max((r.empirical_C for r in reports if not r.degenerate),
                    default=0.0)
        print(f"carleman: {len(reports)} samples, max empirical C = {worst:.6g}")
    elif args.name == "observability":
        reports = observability_check(b, args.samples, params, weights, geom,
                                      seed=cfg.seed)
        rows = [(r.sample, r.initial_sq, r.first_half_sq, r.localized,
                 r.C_initial, r.C_first_half, r.degenerate) for r in reports]
        head = ["sample", "initial_sq", "first_half_sq", "localized",
                "C_initial", "C_first_half", "degenerate"]
        worst = max((r.C_initial for r in reports if not r.degenerate),
                    default=0.0)
        print(f"observability: max C_initial = {worst:.6g}")
    else:
        amp = setup.options["stationary_amplitude"]
        from .experiment import _sine_profile
        ys = amp * _sine_profile(setup.grid)
        f = manufactured_forcing(setup.model, ys, setup.grid).values
        sizes = [10.0 ** (-1 - 0.25 * i) for i in range(9)]
        scan = smoothing_scan(setup.model, ys, f, sizes, T_small=0.1,
                              q=setup.options["estimate_q"], grid=setup.grid)
        rows = list(zip(scan.sizes, scan.measures, scan.terminal_residuals))
        head = ["size_l2", "measure", "terminal_residual"]
        print(f"smoothing: fitted slope = {scan.slope:.4f} "
              f"(residual slope {scan.residual_slope:.4f})")
    with open(out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(head)
        for row in rows:
            writer.writerow([_fmt(v) if isinstance(v, float) else v
                             for v in row])
    print(f"  wrote {out}")
    return 0


def _cmd_export(args):
    arr = load_array_bin(args.binary)
    out = args.out or os.path.splitext(args.binary)[0] + ".csv"
    with open(out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["index_" + str(d) for d in range(arr.ndim)]
                        + ["value"])
        for idx in np.ndindex(*arr.shape):
            writer.writerow(list(idx) + [f"{arr[idx]:.17g}"])
    print(f"wrote {out} ({arr.shape})")
    return 0


if __name__ == "__main__":
    sys.exit(main())
