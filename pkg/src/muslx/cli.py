"""Command-line entry point: ``muslx run | cascade | conjugate-table | verify``.

Exit codes: 0 all selected checks pass, 1 a check failed, 2 bad config or
arguments, 3 the solver failed.
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from importlib import resources
from pathlib import Path

import numpy as np

from . import verify as V
from .config import ConfigError, ExperimentConfig, amplitudes, load_config
from .grid import SineBasis, project_modes
from .noise import diagonal_additive, diagonal_multiplicative
from .orlicz import DEFAULT_DUAL_GRID, BracketExhausted, conjugate, young_from_name
from .solver import (NoContraction, SolverError, epsilon_cascade, noise_mode_cascade,
                     read_ledger, solve_ensemble, solve_multiplicative, write_cascade_csv)

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_SOLVER = 0, 1, 2, 3


def bundled_config(name: str) -> Path:
    """Path of a config shipped with the package, e.g. ``ou_linear.json``."""
    return Path(str(resources.files("muslx") / "configs" / name))


def _say(args, *lines):
    if not args.quiet:
        for line in lines:
            print(line)


def _write_report(out: Path, cfg_raw: dict, reports: list[V.Report], extra: dict) -> None:
    payload = {"config": cfg_raw, **extra, "checks": [r.to_dict() for r in reports]}
    (out / "report.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    (out / "report.txt").write_text("".join(f"{r}\n" for r in reports))


def _ou_parameters(cfg: ExperimentConfig) -> tuple[float, float, float]:
    """``(a0, sigma, mu)`` when the run is a single-mode linear OU problem."""
    kappa = cfg.flux.linear_coefficient(cfg.dt) if cfg.flux.linear_coefficient else None
    if kappa is None or cfg.eps > 0:
        raise ConfigError("checks: ou_variance needs a linear flux (p = 2) without regularisation")
    if cfg.noise is None or not cfg.noise.additive:
        raise ConfigError("checks: ou_variance needs additive noise")
    coeffs = amplitudes(cfg.noise_spec["amplitudes"], cfg.noise.modes)
    if np.any(coeffs[1:] != 0):
        raise ConfigError("checks: ou_variance needs noise in mode 1 only")
    basis = SineBasis(cfg.domain)
    a0 = float(project_modes(basis, cfg.u0, 1)[0])
    rest = cfg.u0 - a0 * basis.mode(1)
    if np.max(np.abs(rest), initial=0.0) > 1e-12 * max(1.0, abs(a0)):
        raise ConfigError("initial: ou_variance needs an initial datum in mode 1 only")
    return a0, float(coeffs[0]), kappa * basis.eigenvalue(1)


def _run_checks(cfg: ExperimentConfig, ensemble) -> list[V.Report]:
    opts = cfg.check_options
    steps = int(round(cfg.T / cfg.dt))
    out = []
    for name in cfg.checks:
        if name == "energy_expectation":
            out.append(V.energy_residual_expectation(ensemble, opts.get("t_check"),
                                                     float(opts.get("c_bias", V.C_BIAS))))
        elif name == "ou_variance":
            a0, sigma, mu = _ou_parameters(cfg)
            out.append(V.ou_variance_check(ensemble, a0, sigma, mu, opts.get("t_check")))
        elif name == "step_identity":
            out.append(V.step_identity_check(ensemble, float(opts.get("step_tol", 1e-8))))
        elif name == "ito_isometry":
            if cfg.noise is None or not cfg.noise.additive:
                raise ConfigError("checks: ito_isometry needs additive noise")
            out.append(V.ito_isometry_check(cfg.noise, cfg.domain, cfg.T, steps, cfg.paths, cfg.seed))
        elif name == "piecewise_consistency":
            if cfg.exponent is None:
                raise ConfigError("checks: piecewise_consistency needs a plaplace flux")
            noise = cfg.solver_config().noise_or_zero()
            draw = cfg.solver_config().draw(0) if cfg.noise is not None else None
            out.append(V.piecewise_consistency(cfg.domain, cfg.exponent, cfg.u0, cfg.T, cfg.dt, noise,
                                               draw, cfg.newton_tol, cfg.newton_max))
        elif name == "picard":
            tol = float(opts.get("picard_tol", 1e-8))
            res = solve_multiplicative(cfg.solver_config(), 0, cfg.alpha, tol)
            out.append(V.picard_report(res, tol, opts.get("picard_max_iterations")))
        elif name == "gaussian_modular":
            if cfg.noise is None or not cfg.noise.additive:
                raise ConfigError("checks: gaussian_modular needs additive noise")
            try:
                m = young_from_name(opts.get("young", "exp_beta:1,0.5"))
            except ValueError as exc:
                raise ConfigError(f"check_options.young: {exc}") from exc
            out.append(V.gaussian_modular_finiteness(cfg.noise, cfg.domain, m,
                                                     opts.get("lambdas", [1.0]), cfg.T, steps,
                                                     cfg.paths, cfg.seed))
    return out


def cmd_run(args) -> int:
    cfg = load_config(args.config).with_overrides(args.seed, args.paths, args.out)
    out = Path(cfg.output)
    scfg = cfg.solver_config()
    if args.trajectories:
        scfg = replace(scfg, keep_trajectory=True)
    try:
        ensemble = solve_ensemble(scfg, cfg.paths)
        reports = _run_checks(cfg, ensemble)
    except NoContraction as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except SolverError as exc:
        print(f"solver error at step {exc.step}: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    ledgers = out / "ledgers"
    ledgers.mkdir(parents=True, exist_ok=True)
    for res in ensemble:
        res.write_ledger(ledgers / f"path_{res.path_index:05d}.csv")
        if args.trajectories:
            res.write_trajectory(cfg.domain, ledgers / f"trajectory_{res.path_index:05d}.csv")
    (out / "config.json").write_text(json.dumps(cfg.raw, indent=2, sort_keys=True) + "\n")
    _write_report(out, cfg.raw, reports, {"seed": cfg.seed, "paths": cfg.paths})
    _say(args, *(str(r) for r in reports))
    return EXIT_OK if all(r.passed for r in reports) else EXIT_CHECK


def _parse_values(text: str, kind) -> list:
    try:
        vals = [kind(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigError(f"--values: {exc}") from exc
    if not vals:
        raise ConfigError("--values: empty list")
    return vals


def cmd_cascade(args) -> int:
    cfg = load_config(args.config).with_overrides(args.seed, args.paths, args.out)
    out = Path(cfg.output)
    scfg = cfg.solver_config()
    if args.dial == "eps":
        vals = _parse_values(args.values, float)
        if any(b > a for a, b in zip(vals, vals[1:])):
            raise ConfigError("--values: eps list must be descending")
        if cfg.young is None:
            raise ConfigError("regularization.young: required for an eps cascade")
        run = lambda: epsilon_cascade(scfg, vals, cfg.paths)
    else:
        vals = _parse_values(args.values, int)
        if any(b < a for a, b in zip(vals, vals[1:])) or vals[0] < 1:
            raise ConfigError("--values: mode list must be ascending and positive")
        if cfg.noise_spec is None:
            raise ConfigError("noise: a mode cascade needs noise")
        Nmax = vals[-1]
        coeffs = amplitudes(cfg.noise_spec["amplitudes"], Nmax) if isinstance(
            cfg.noise_spec["amplitudes"], str) else None
        if coeffs is None:
            given = np.asarray(cfg.noise_spec["amplitudes"], dtype=float)
            if given.size < Nmax:
                raise ConfigError(f"noise.amplitudes: {given.size} amplitudes, cascade needs {Nmax}")
            coeffs = given[:Nmax]
        basis = SineBasis(cfg.domain)
        make = diagonal_additive if cfg.noise.additive else diagonal_multiplicative
        scfg = replace(scfg, noise=make(basis, coeffs))
        run = lambda: noise_mode_cascade(scfg, vals, cfg.paths)
    try:
        rows = run()
    except SolverError as exc:
        print(f"solver error at step {exc.step}: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    out.mkdir(parents=True, exist_ok=True)
    write_cascade_csv(rows, out / "cascade.csv")
    for r in rows:
        lhs = "" if r.lhs_mean is None else f"{r.lhs_mean:.6e} +- {r.lhs_stderr:.2e}"
        ratio = "" if r.ratio is None else f" ratio={r.ratio:.4g}"
        _say(args, f"{r.dial} {r.value_from:g} -> {r.value_to:g}  {lhs}{ratio}")
    return EXIT_OK


def cmd_conjugate_table(args) -> int:
    try:
        m = young_from_name(args.name)
    except ValueError as exc:
        raise ConfigError(f"name: {exc}") from exc
    grid = DEFAULT_DUAL_GRID
    if args.grid:
        lo, hi, n = _parse_values(args.grid, float)
        grid = np.logspace(np.log10(lo), np.log10(hi), int(n))
    try:
        table = conjugate(m, grid)
    except BracketExhausted as exc:
        print(f"conjugation failed: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    table.to_csv(out)
    _say(args, f"wrote {len(table.nodes)} rows of {table.label} to {out}")
    return EXIT_OK


def cmd_verify(args) -> int:
    root = Path(args.dir)
    files = sorted((root / "ledgers").glob("path_*.csv"))
    if not files:
        raise ConfigError(f"dir: no ledgers under {root / 'ledgers'}")
    ensemble = [read_ledger(f) for f in files]
    cfg = load_config(root / "config.json") if (root / "config.json").exists() else None
    opts = cfg.check_options if cfg is not None else {}
    c_bias = float(opts.get("c_bias", V.C_BIAS) if args.c_bias is None else args.c_bias)
    reports = [V.energy_residual_expectation(ensemble, args.t_check, c_bias)]
    if cfg is not None and "ou_variance" in cfg.checks:
        a0, sigma, mu = _ou_parameters(cfg)
        reports.append(V.ou_variance_check(ensemble, a0, sigma, mu, args.t_check))
    _say(args, *(str(r) for r in reports))
    return EXIT_OK if all(r.passed for r in reports) else EXIT_CHECK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="muslx", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_required=False):
        sp.add_argument("--seed", type=int)
        sp.add_argument("--paths", type=int)
        sp.add_argument("--out", required=out_required)
        sp.add_argument("--quiet", action="store_true")

    r = sub.add_parser("run", help="solve a config and run its checks")
    r.add_argument("config")
    r.add_argument("--trajectories", action="store_true", help="also write per-step fields")
    common(r)
    r.set_defaults(func=cmd_run)

    c = sub.add_parser("cascade", help="epsilon or noise-mode cascade table")
    c.add_argument("config")
    c.add_argument("--dial", choices=("eps", "modes"), required=True)
    c.add_argument("--values", required=True, help="comma-separated list")
    common(c)
    c.set_defaults(func=cmd_cascade)

    t = sub.add_parser("conjugate-table", help="tabulate a numerical convex conjugate")
    t.add_argument("name", help="power:p, exp_beta:B,beta or zygmund")
    t.add_argument("--out", required=True)
    t.add_argument("--grid", help="lo,hi,n for a log-spaced dual grid")
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_conjugate_table)

    v = sub.add_parser("verify", help="re-run expectation checks on stored ledgers")
    v.add_argument("dir", help="output directory of a previous run")
    v.add_argument("--t-check", type=float)
    v.add_argument("--c-bias", type=float)
    v.add_argument("--quiet", action="store_true")
    v.set_defaults(func=cmd_verify)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
