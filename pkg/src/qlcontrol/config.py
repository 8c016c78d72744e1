"""Experiment configuration: sectioned key-value files.

The schema is documented in docs/config.md; parsing is strict and every
validation failure raises ConfigInvalid naming the offending field.
"""

import configparser
from dataclasses import dataclass, field as dfield
from importlib import resources

from .errors import ConfigInvalid
from .geometry import ControlRegion, Grid, SpatialDomain
from .nonlinearity import model_from_config
from .solvers import TimeGrid

_REQUIRED_SECTIONS = ("domain", "region", "model", "grid", "params",
                      "initial", "run")

_MODEL_PARAM_KEYS = {"c", "beta", "m", "eps"}


@dataclass(frozen=True)
class ExperimentConfig:
    raw: dict                      # section -> {key: string}
    path: str = ""
    seed: int = 0

    def get(self, section, key, default=None):
        return self.raw.get(section, {}).get(key, default)

    def text(self):
        """Canonical text form (sorted), used for report echoing/checksums."""
        lines = []
        for section in sorted(self.raw):
            lines.append(f"[{section}]")
            for key in sorted(self.raw[section]):
                lines.append(f"{key} = {self.raw[section][key]}")
            lines.append("")
        return "\n".join(lines)


def _pairs(text, field):
    out = []
    for chunk in text.split(";"):
        parts = [p.strip() for p in chunk.split(",")]
        if len(parts) != 2:
            raise ConfigInvalid(field, f"expected 'lo,hi' pairs, got {text!r}")
        try:
            out.append((float(parts[0]), float(parts[1])))
        except ValueError:
            raise ConfigInvalid(field, f"non-numeric bound in {chunk!r}")
    return tuple(out)


def _get(raw, section, key, cast=str, default=None, required=False):
    field = f"{section}.{key}"
    sec = raw.get(section, {})
    if key not in sec:
        if required:
            raise ConfigInvalid(field, "missing required key")
        return default
    try:
        val = sec[key]
        if cast is bool:
            return val.strip().lower() in ("1", "true", "yes", "on")
        return cast(val)
    except (TypeError, ValueError):
        raise ConfigInvalid(field, f"cannot parse {sec[key]!r} as {cast.__name__}")


def load_config(path, seed_override=None) -> ExperimentConfig:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    read = parser.read(path)
    if not read:
        raise ConfigInvalid("path", f"cannot read config file {path!r}")
    raw = {s: dict(parser.items(s)) for s in parser.sections()}
    for section in _REQUIRED_SECTIONS:
        if section not in raw:
            raise ConfigInvalid(section, "missing required section")
    seed = seed_override if seed_override is not None else _get(
        raw, "run", "seed", int, 0)
    cfg = ExperimentConfig(raw, str(path), int(seed))
    build_setup(cfg)  # validate eagerly
    return cfg


def bundled_config(name):
    """Path of a packaged configuration (e.g. 'linear_1d_smoke')."""
    res = resources.files("qlcontrol.configs") / f"{name}.cfg"
    if not res.is_file():
        raise ConfigInvalid("config", f"no bundled config named {name!r}")
    return str(res)


@dataclass
class ExperimentSetup:
    """Validated, constructed objects for one run."""

    config: ExperimentConfig
    domain: SpatialDomain
    grid: Grid
    region: ControlRegion
    model: object
    tg: TimeGrid
    lam: float
    s: float
    proof_regime: bool
    run_kind: str
    options: dict = dfield(default_factory=dict)


def build_setup(cfg: ExperimentConfig) -> ExperimentSetup:
    raw = cfg.raw
    kind = _get(raw, "domain", "kind", str, required=True)
    if kind not in ("interval", "rectangle"):
        raise ConfigInvalid("domain.kind", f"unknown domain kind {kind!r}")
    bounds = _pairs(_get(raw, "domain", "bounds", str, required=True),
                    "domain.bounds")
    nodes_text = _get(raw, "domain", "nodes", str, required=True)
    try:
        nodes = tuple(int(n) for n in nodes_text.split(","))
    except ValueError:
        raise ConfigInvalid("domain.nodes", f"bad node counts {nodes_text!r}")
    ndim = 1 if kind == "interval" else 2
    if len(bounds) != ndim or len(nodes) != ndim:
        raise ConfigInvalid("domain", "bounds/nodes arity mismatch with kind")
    if any(n < 8 for n in nodes):
        raise ConfigInvalid("domain.nodes", "need at least 8 nodes per axis")
    try:
        domain = SpatialDomain(kind, bounds, nodes)
        grid = Grid(domain)
    except ValueError as exc:
        raise ConfigInvalid("domain", str(exc))

    omega = _pairs(_get(raw, "region", "omega", str, required=True),
                   "region.omega")
    omega0 = _pairs(_get(raw, "region", "omega0", str, required=True),
                    "region.omega0")
    if len(omega) != ndim or len(omega0) != ndim:
        raise ConfigInvalid("region", "region arity mismatch with domain")
    try:
        region = ControlRegion.build(grid, omega, omega0)
    except Exception as exc:
        raise ConfigInvalid("region", str(exc))

    name = _get(raw, "model", "name", str, required=True)
    params = {
        k: float(v) for k, v in raw["model"].items() if k in _MODEL_PARAM_KEYS
    }
    try:
        model = model_from_config(name, **params)
    except (KeyError, ValueError, TypeError) as exc:
        raise ConfigInvalid("model", str(exc))

    steps = _get(raw, "grid", "steps", int, required=True)
    horizon = _get(raw, "grid", "horizon", float, required=True)
    if steps < 16:
        raise ConfigInvalid("grid.steps", "need at least 16 time steps")
    if steps % 2:
        raise ConfigInvalid("grid.steps", "need an even number of time steps")
    if horizon <= 0:
        raise ConfigInvalid("grid.horizon", "horizon must be positive")
    tg = TimeGrid(horizon, steps)

    lam = _get(raw, "params", "lambda", float, required=True)
    s = _get(raw, "params", "s", float, required=True)
    if lam <= 0 or s <= 0:
        raise ConfigInvalid("params", "lambda and s must be positive")
    proof_regime = _get(raw, "params", "proof_regime", bool, False)

    run_kind = _get(raw, "run", "kind", str, "two_phase")
    if run_kind not in ("two_phase", "picard", "uncontrolled"):
        raise ConfigInvalid("run.kind", f"unknown run kind {run_kind!r}")

    options = {
        "stationary_amplitude": _get(raw, "initial", "stationary_amplitude",
                                     float, 0.1),
        "profile": _get(raw, "initial", "profile", str, "sine"),
        "scale": _get(raw, "initial", "scale", float, 1e-2),
        "T0_fraction": _get(raw, "run", "t0_fraction", float, 0.25),
        "max_outer": _get(raw, "run", "max_outer", int, 15),
        "tol_sup": _get(raw, "run", "tol_sup", float, 1e-8),
        "terminal_tol_rel": _get(raw, "run", "terminal_tol_rel", float, 1e-6),
        "grad_rtol": _get(raw, "run", "grad_rtol", float, 1e-9),
        "max_cg": _get(raw, "run", "max_cg", int, 2000),
        "ladder_q": _get(raw, "run", "ladder_q", float, 4.0),
        "ladder_n": _get(raw, "run", "ladder_n", int, max(ndim, 2)),
        "carleman_samples": _get(raw, "diagnostics", "carleman_samples", int, 0),
        "observability_samples": _get(raw, "diagnostics",
                                      "observability_samples", int, 0),
        "smoothing": _get(raw, "diagnostics", "smoothing", bool, False),
        "figures": _get(raw, "output", "figures", bool, True),
        "export_trajectories": _get(raw, "output", "export_trajectories",
                                    bool, True),
        "estimate_q": _get(raw, "diagnostics", "estimate_q", float, 4.0),
    }
    if options["profile"] not in ("sine", "rough"):
        raise ConfigInvalid("initial.profile",
                            f"unknown profile {options['profile']!r}")
    if not 0.0 <= options["T0_fraction"] < 1.0:
        raise ConfigInvalid("run.t0_fraction", "must lie in [0, 1)")
    return ExperimentSetup(cfg, domain, grid, region, model, tg, lam, s,
                           proof_regime, run_kind, options)
