"""JSON experiment configs.

A config is a JSON object with the sections ``grid``, ``flux``, ``noise``,
``initial``, ``solver`` and optionally ``regularization``, ``checks``,
``check_options``, ``output`` and ``seed``. See ``examples/`` in the
package data for complete files. Every validation error is a
:class:`ConfigError` whose message starts with the dotted field path.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .grid import Domain, SineBasis, lift_modes
from .noise import NoiseModel, diagonal_additive, diagonal_multiplicative, geometric
from .operators import ExponentField, Flux, double_phase_flux, linear_flux, plaplace_flux
from .orlicz import YoungFunction, young_from_name
from .solver import SolverConfig

KNOWN_CHECKS = ("energy_expectation", "ou_variance", "ito_isometry", "piecewise_consistency",
                "picard", "gaussian_modular", "step_identity")


class ConfigError(ValueError):
    pass


def _fail(path: str, msg: str):
    raise ConfigError(f"{path}: {msg}")


def _get(obj: dict, key: str, path: str, kind=None, default=...):
    if not isinstance(obj, dict):
        _fail(path, "expected an object")
    if key not in obj:
        if default is ...:
            _fail(f"{path}.{key}", "missing")
        return default
    val = obj[key]
    if kind is None:
        return val
    numeric = kind in (int, float, (int, float))
    if not isinstance(val, kind) or (numeric and isinstance(val, bool)):
        _fail(f"{path}.{key}", f"expected {getattr(kind, '__name__', 'number')}, got {val!r}")
    return val


def _number(obj, key, path, default=...):
    return float(_get(obj, key, path, (int, float), default))


@dataclass(frozen=True)
class ExperimentConfig:
    domain: Domain
    flux: Flux
    flux_spec: dict
    noise: NoiseModel | None
    noise_spec: dict | None
    u0: np.ndarray
    T: float
    dt: float
    eps: float = 0.0
    young: YoungFunction | None = None
    newton_tol: float = 1e-10
    newton_max: int = 50
    paths: int = 1
    seed: int = 0
    keep_trajectory: bool = False
    alpha: float = 10.0
    checks: tuple[str, ...] = ()
    check_options: dict = field(default_factory=dict)
    output: str = "out"
    exponent: ExponentField | None = None
    raw: dict = field(default_factory=dict)

    def solver_config(self) -> SolverConfig:
        return SolverConfig(self.domain, self.flux, self.u0, self.T, self.dt, self.noise, self.eps,
                            self.young, self.newton_tol, self.newton_max, self.paths, self.seed,
                            self.keep_trajectory)

    def with_overrides(self, seed=None, paths=None, output=None) -> "ExperimentConfig":
        out = self
        if seed is not None:
            out = replace(out, seed=int(seed))
        if paths is not None:
            if paths < 1:
                _fail("paths", "must be positive")
            out = replace(out, paths=int(paths))
        if output is not None:
            out = replace(out, output=str(output))
        return out


def _grid(spec) -> Domain:
    dim = _get(spec, "dim", "grid", int, 1)
    cells = _get(spec, "cells", "grid", int)
    extent = _get(spec, "extent", "grid", list, [0.0, 1.0])
    if len(extent) != 2:
        _fail("grid.extent", "expected [lo, hi]")
    try:
        return Domain(dim, cells, (float(extent[0]), float(extent[1])))
    except ValueError as exc:
        _fail("grid", str(exc))


def _exponent(spec, path: str, dt: float, T: float) -> ExponentField:
    if isinstance(spec, (int, float)) and not isinstance(spec, bool):
        return ExponentField.constant(float(spec))
    bps = [float(b) for b in _get(spec, "breakpoints", path, list, [])]
    pieces = _get(spec, "pieces", path, list)
    for i, piece in enumerate(pieces):
        vals = piece if isinstance(piece, list) else [piece]
        if not 1 <= len(vals) <= 3 or not all(isinstance(v, (int, float)) for v in vals):
            _fail(f"{path}.pieces[{i}]", "expected a number or [c0, c1(, c2)]")
    for b in bps:
        k = b / dt
        if 0 < b < T and abs(k - round(k)) > 1e-9 * max(1.0, k):
            _fail(f"{path}.breakpoints", f"breakpoint {b} is not a multiple of dt={dt}")
    try:
        return ExponentField.piecewise(bps, pieces)
    except ValueError as exc:
        _fail(path, str(exc))


def _flux(spec, dt: float, T: float) -> tuple[Flux, ExponentField | None]:
    name = _get(spec, "name", "flux", str)
    if name == "plaplace":
        field_ = _exponent(_get(spec, "p", "flux"), "flux.p", dt, T)
        return plaplace_flux(field_, _number(spec, "delta", "flux", 0.0)), field_
    if name == "double_phase":
        return double_phase_flux(_number(spec, "p", "flux"), _number(spec, "q", "flux"),
                                 _number(spec, "a", "flux", 1.0)), None
    if name == "linear":
        return linear_flux(_number(spec, "coefficient", "flux", 1.0)), None
    _fail("flux.name", f"unknown flux {name!r} (expected plaplace, double_phase or linear)")


def amplitudes(spec, modes: int, path: str = "noise.amplitudes") -> np.ndarray:
    """Per-mode amplitudes: a list, ``geometric:r`` (``r**j``) or ``single:s``."""
    if isinstance(spec, list):
        if len(spec) != modes:
            _fail(path, f"{len(spec)} amplitudes for {modes} modes")
        return np.asarray(spec, dtype=float)
    if isinstance(spec, str):
        kind, _, arg = spec.partition(":")
        try:
            val = float(arg)
        except ValueError:
            _fail(path, f"bad amplitude expression {spec!r}")
        if kind == "geometric":
            return geometric(modes, val)
        if kind == "single":
            out = np.zeros(modes)
            out[0] = val
            return out
    _fail(path, f"bad amplitude expression {spec!r}")


def _noise(spec, domain: Domain) -> NoiseModel | None:
    if spec is None:
        return None
    kind = _get(spec, "type", "noise", str)
    modes = _get(spec, "modes", "noise", int)
    basis = SineBasis(domain)
    if not 1 <= modes <= basis.size:
        _fail("noise.modes", f"must be in 1..{basis.size}")
    coeffs = amplitudes(_get(spec, "amplitudes", "noise"), modes)
    scale = _number(spec, "lipschitz", "noise", 1.0)
    if kind == "additive":
        return diagonal_additive(basis, coeffs)
    if kind == "multiplicative":
        return diagonal_multiplicative(basis, scale * coeffs)
    _fail("noise.type", f"unknown noise type {kind!r} (expected additive or multiplicative)")


def _initial(spec, domain: Domain, base: Path | None) -> np.ndarray:
    basis = SineBasis(domain)
    if isinstance(spec, str):
        kind, _, arg = spec.partition(":")
        if kind == "zero":
            return domain.zeros()
        if kind == "mode":
            try:
                return basis.mode(int(arg))
            except (ValueError, IndexError) as exc:
                _fail("initial", str(exc))
        if kind == "bump":
            return domain.sample(lambda *x: np.prod([4 * c * (1 - c) for c in x], axis=0))
        _fail("initial", f"unknown initial datum {spec!r}")
    if isinstance(spec, dict) and "modes" in spec:
        coeffs = _get(spec, "modes", "initial", list)
        if len(coeffs) > basis.size:
            _fail("initial.modes", "more coefficients than grid modes")
        return lift_modes(basis, coeffs)
    if isinstance(spec, dict) and "csv" in spec:
        p = Path(_get(spec, "csv", "initial", str))
        if base is not None and not p.is_absolute():
            p = base / p
        try:
            data = np.genfromtxt(p, delimiter=",", skip_header=1)
        except OSError as exc:
            _fail("initial.csv", str(exc))
        vals = np.atleast_2d(data)[:, -1]
        if vals.size != int(np.prod(domain.shape)):
            _fail("initial.csv", f"{vals.size} values for a grid of {domain.shape}")
        return vals.reshape(domain.shape)
    _fail("initial", "expected a named datum, {\"modes\": [...]} or {\"csv\": path}")


def parse_config(raw: dict, base: Path | None = None) -> ExperimentConfig:
    if not isinstance(raw, dict):
        _fail("config", "top level must be an object")
    domain = _grid(_get(raw, "grid", "config", dict))
    sol = _get(raw, "solver", "config", dict)
    T = _number(sol, "T", "solver")
    dt = _number(sol, "dt", "solver")
    if not (T > 0 and dt > 0):
        _fail("solver", "T and dt must be positive")
    if abs(T / dt - round(T / dt)) > 1e-9 * max(1.0, T / dt):
        _fail("solver.dt", f"T={T} is not a multiple of dt={dt}")
    flux, exponent = _flux(_get(raw, "flux", "config", dict), dt, T)
    noise_spec = _get(raw, "noise", "config", (dict, type(None)), None)
    noise = _noise(noise_spec, domain)
    u0 = _initial(_get(raw, "initial", "config", (str, dict)), domain, base)
    reg = _get(raw, "regularization", "config", dict, {})
    eps = _number(reg, "eps", "regularization", 0.0)
    young = None
    if "young" in reg:
        try:
            young = young_from_name(_get(reg, "young", "regularization", str))
        except ValueError as exc:
            _fail("regularization.young", str(exc))
    if eps < 0:
        _fail("regularization.eps", "must be nonnegative")
    if eps > 0 and young is None:
        _fail("regularization.young", "required when eps > 0")
    checks = tuple(_get(raw, "checks", "config", list, []))
    for c in checks:
        if c not in KNOWN_CHECKS:
            _fail("checks", f"unknown check {c!r} (known: {', '.join(KNOWN_CHECKS)})")
    seed = _get(raw, "seed", "config", int, 0)
    paths = _get(sol, "paths", "solver", int, 1)
    if paths < 1:
        _fail("solver.paths", "must be positive")
    return ExperimentConfig(
        domain, flux, _get(raw, "flux", "config"), noise, noise_spec, u0, T, dt, eps, young,
        _number(sol, "newton_tol", "solver", 1e-10), _get(sol, "newton_max", "solver", int, 50),
        paths, seed, bool(_get(sol, "keep_trajectory", "solver", bool, False)),
        _number(sol, "alpha", "solver", 10.0), checks,
        _get(raw, "check_options", "config", dict, {}), _get(raw, "output", "config", str, "out"),
        exponent, raw,
    )


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except OSError as exc:
        raise ConfigError(f"config: cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config: malformed JSON in {path}: {exc}") from exc
    return parse_config(raw, path.parent)
