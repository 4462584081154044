"""Young functions, isotropic N-functions, modulars and Luxemburg norms.

Everything here works on vectorised numpy arrays. Young functions carry
their derivative explicitly because the convex conjugate, the
regularised flux and the Newton solver all need it.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.interpolate import PchipInterpolator

Array = np.ndarray

GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


class BracketExhausted(RuntimeError):
    """The supremum defining a conjugate was not attained inside the search bracket."""


class ModularOverflow(ArithmeticError):
    """The modular of a field is +inf at working precision."""


class NotInSpace(RuntimeError):
    """No finite Luxemburg scaling was found below the cap."""


@dataclass(frozen=True)
class YoungFunction:
    """Convex superlinear ``m`` with ``m(0) = 0``.

    ``growth`` holds ``(B, beta)`` when ``m(s) = exp(B s^(1+beta)) - 1``
    style bounds are declared; ``conjugate_exact`` is an optional closed
    form of ``m*`` used where interpolation error would swamp a check.
    """

    eval: Callable[[Array], Array]
    deriv: Callable[[Array], Array]
    label: str = "m"
    growth: tuple[float, float] | None = None
    deriv2: Callable[[Array], Array] | None = None
    conjugate_exact: Callable[[Array], Array] | None = None

    def __post_init__(self):
        if float(self.eval(np.array(0.0))) != 0.0:
            raise ValueError(f"{self.label}: m(0) must vanish")
        probe = np.asarray(self.eval(np.array([1e-3, 1.0, 10.0])), dtype=float)
        if np.any(probe < 0):
            raise ValueError(f"{self.label}: Young functions are nonnegative")

    def __call__(self, s):
        return self.eval(np.asarray(s, dtype=float))

    def second_derivative(self, s):
        s = np.asarray(s, dtype=float)
        if self.deriv2 is not None:
            return self.deriv2(s)
        step = 1e-6 * np.maximum(s, 1e-3)
        return (self.deriv(s + step) - self.deriv(np.maximum(s - step, 0.0))) / (
            s + step - np.maximum(s - step, 0.0)
        )


def power(p: float, coef: float | None = None) -> YoungFunction:
    """``coef * s**p``, with ``coef = 1/p`` by default."""
    if p <= 1:
        raise ValueError(f"power Young function needs p > 1, got {p}")
    c = 1.0 / p if coef is None else float(coef)
    q = p / (p - 1.0)
    # conjugate of c s^p is (c p)^(1-q) x^q / q
    cstar = (c * p) ** (1.0 - q) / q
    return YoungFunction(
        eval=lambda s: c * np.abs(s) ** p,
        deriv=lambda s: c * p * np.abs(s) ** (p - 1),
        deriv2=lambda s: c * p * (p - 1) * _safe_pow(s, p - 2),
        label=f"power:{p:g}" + ("" if coef is None else f"*{c:g}"),
        conjugate_exact=lambda x: cstar * np.abs(x) ** q,
    )


def _safe_pow(s, e):
    with np.errstate(divide="ignore"):
        return np.abs(s) ** e


def exp_beta(B: float, beta: float) -> YoungFunction:
    """``exp(B s^(1+beta)) - 1``, the Gaussian-integrable growth class."""
    if B <= 0 or not 0 < beta < 1:
        raise ValueError(f"exp_beta needs B > 0 and beta in (0,1), got {B}, {beta}")
    a = 1.0 + beta

    def ev(s):
        with np.errstate(over="ignore"):
            return np.expm1(B * np.abs(s) ** a)

    def dv(s):
        s = np.abs(s)
        with np.errstate(over="ignore", invalid="ignore"):
            return B * a * s**beta * np.exp(B * s**a)

    return YoungFunction(ev, dv, label=f"exp_beta:{B:g},{beta:g}", growth=(B, beta))


def zygmund() -> YoungFunction:
    """``s^2 log(e + s)``."""

    def ev(s):
        s = np.abs(s)
        return s**2 * np.log(np.e + s)

    def dv(s):
        s = np.abs(s)
        return 2 * s * np.log(np.e + s) + s**2 / (np.e + s)

    return YoungFunction(ev, dv, label="zygmund")


def linear() -> YoungFunction:
    """``s``: convex but not superlinear. Kept for axiom-check negatives."""
    return YoungFunction(lambda s: np.abs(s), lambda s: np.ones_like(s), label="linear")


def young_from_name(name: str) -> YoungFunction:
    """Parse ``power:p``, ``exp_beta:B,beta``, ``zygmund`` or ``linear``."""
    kind, _, args = name.partition(":")
    try:
        if kind == "power":
            return power(float(args))
        if kind == "exp_beta":
            B, beta = (float(a) for a in args.split(","))
            return exp_beta(B, beta)
        if kind == "zygmund" and not args:
            return zygmund()
        if kind == "linear" and not args:
            return linear()
    except ValueError as exc:
        raise ValueError(f"bad Young function spec {name!r}: {exc}") from exc
    raise ValueError(f"unknown Young function {name!r}")


# -- conjugation ------------------------------------------------------------

DEFAULT_DUAL_GRID = np.logspace(-4, 4, 512)


def _bracket(m: YoungFunction, x: Array, cap: float) -> tuple[Array, Array]:
    """Bracket the maximiser of ``s x - m(s)`` using ``m'``."""
    hi = np.full_like(x, 2.0**-40)
    with np.errstate(over="ignore", invalid="ignore"):
        while True:
            short = ~(m.deriv(hi) >= x)
            if not short.any():
                break
            if np.any(hi[short] > cap):
                bad = x[short & (hi > cap)][0]
                raise BracketExhausted(
                    f"sup of s*{bad:g} - {m.label}(s) not attained below s={cap:g}"
                )
            hi = np.where(short, hi * 2.0, hi)
    lo = np.where(hi > 2.0**-40, hi / 2.0, 0.0)
    return lo, hi


def golden_max(f: Callable[[Array], Array], lo: Array, hi: Array, rtol: float = 1e-10) -> Array:
    """Vectorised golden-section maximisation of concave ``f`` on ``[lo, hi]``."""
    a, b = lo.astype(float).copy(), hi.astype(float).copy()
    c = b - GOLDEN * (b - a)
    d = a + GOLDEN * (b - a)
    fc, fd = f(c), f(d)
    scale = np.maximum(np.abs(hi), np.finfo(float).tiny)
    for _ in range(400):
        if np.all(b - a <= rtol * scale):
            break
        left = fc > fd
        # maximiser in [a, d] where left, else [c, b]
        b = np.where(left, d, b)
        a = np.where(left, a, c)
        new_c = b - GOLDEN * (b - a)
        new_d = a + GOLDEN * (b - a)
        fd_next = np.where(left, fc, f(new_d))
        fc_next = np.where(left, f(new_c), fd)
        c, d, fc, fd = new_c, new_d, fc_next, fd_next
    return 0.5 * (a + b)


@dataclass(frozen=True)
class ConjugateTable:
    """Tabulated ``m*`` on a positive increasing grid.

    Interpolation is monotone cubic in log-log coordinates, which keeps
    power laws exact between nodes; below the first node the table
    decays along the first-segment power law to ``m*(0) = 0``.
    """

    nodes: Array
    values: Array
    label: str = "m*"
    maximisers: Array | None = None
    source: YoungFunction | None = field(default=None, repr=False, compare=False)
    _interp: PchipInterpolator = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        nodes = np.asarray(self.nodes, dtype=float)
        values = np.asarray(self.values, dtype=float)
        if nodes.ndim != 1 or nodes.size < 2 or np.any(np.diff(nodes) <= 0) or nodes[0] <= 0:
            raise ValueError("conjugate nodes must be a positive increasing grid of size >= 2")
        if np.any(values <= 0):
            raise ValueError(f"{self.label}: conjugate values must be positive on the grid")
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "values", values)
        object.__setattr__(
            self, "_interp", PchipInterpolator(np.log(nodes), np.log(values), extrapolate=True)
        )

    def __call__(self, x):
        x = np.abs(np.asarray(x, dtype=float))
        out = np.zeros_like(x)
        pos = x > 0
        with np.errstate(over="ignore"):
            out[pos] = np.exp(self._interp(np.log(x[pos])))
        return out

    def derivative(self, x):
        x = np.abs(np.asarray(x, dtype=float))
        out = np.zeros_like(x)
        pos = x > 0
        lx = np.log(x[pos])
        with np.errstate(over="ignore"):
            out[pos] = np.exp(self._interp(lx)) * self._interp(lx, 1) / x[pos]
        return out

    def pointwise(self, x):
        """``m*(x)`` by a direct sup at each ``x`` (needs ``source``)."""
        if self.source is None:
            raise ValueError(f"{self.label}: table has no source function")
        x = np.abs(np.asarray(x, dtype=float))
        out = np.zeros_like(x)
        pos = x > 0
        if pos.any():
            out[pos] = _sup(self.source, x[pos], 1e12)[1]
        return out

    def as_young(self) -> YoungFunction:
        return YoungFunction(self.__call__, self.derivative, label=f"table({self.label})")

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["x", "conjugate"])
            for x, v in zip(self.nodes, self.values):
                w.writerow([repr(float(x)), repr(float(v))])


def conjugate(m: YoungFunction, dual_grid=None, cap: float = 1e12) -> ConjugateTable:
    """Numerical ``m*(x) = sup_s (s x - m(s))`` on ``dual_grid``."""
    x = np.asarray(DEFAULT_DUAL_GRID if dual_grid is None else dual_grid, dtype=float)
    if x.size == 0:
        raise ValueError("empty dual grid")
    if np.any(np.diff(x) <= 0) or x[0] <= 0:
        raise ValueError("dual grid must be positive and strictly increasing")
    s_star, values = _sup(m, x, cap)
    return ConjugateTable(x, values, label=f"{m.label}*", maximisers=s_star, source=m)


def _sup(m: YoungFunction, x: Array, cap: float) -> tuple[Array, Array]:
    lo, hi = _bracket(m, x, cap)

    def objective(s):
        with np.errstate(over="ignore", invalid="ignore"):
            v = s * x - m.eval(s)
        return np.where(np.isfinite(v), v, -np.inf)

    s_star = golden_max(objective, lo, hi)
    return s_star, objective(s_star)


def fenchel_young_gap(m: YoungFunction, mstar, s, x):
    """``m(s) + m*(x) - s x``.

    A :class:`ConjugateTable` that knows its source is evaluated by a
    direct sup rather than interpolation, so the gap is nonnegative to
    rounding instead of to interpolation error.
    """
    s = np.asarray(s, dtype=float)
    x = np.asarray(x, dtype=float)
    if isinstance(mstar, ConjugateTable) and mstar.source is not None:
        star = mstar.pointwise(x)
    else:
        star = mstar(x)
    return m(s) + star - s * x


# -- N-functions ------------------------------------------------------------


@dataclass(frozen=True)
class NFunction:
    """Isotropic ``M(t, x, r)`` with ``lower(r) <= M <= upper(r)``.

    ``eval`` receives the time, a tuple of coordinate arrays and the
    magnitude ``r >= 0``; isotropy is structural because only ``|xi|``
    is ever passed in.
    """

    eval: Callable
    lower: YoungFunction
    upper: YoungFunction
    label: str = "M"

    def __call__(self, t, x, r):
        return self.eval(t, x, np.abs(np.asarray(r, dtype=float)))


def isotropic(m: YoungFunction) -> NFunction:
    """``M(t, x, r) = m(r)``."""
    return NFunction(lambda t, x, r: m.eval(r), m, m, label=m.label)


def conjugate_nfunction(mstar: "YoungFunction | ConjugateTable") -> NFunction:
    """Isotropic N-function ``r -> m*(r)`` from a closed-form or tabulated conjugate."""
    ystar = mstar.as_young() if isinstance(mstar, ConjugateTable) else mstar
    return NFunction(lambda t, x, r: ystar.eval(r), ystar, ystar, label=ystar.label)


def double_phase_nfunction(p: float, q: float, a, a_max: float) -> NFunction:
    """``r^p/p + a(t,x) r^q/q``; ``a`` is a constant or ``a(t, x)``."""
    coeff = a if callable(a) else (lambda t, x, c=float(a): c)
    lower = power(p)
    upper = YoungFunction(
        lambda s: np.abs(s) ** p / p + a_max * np.abs(s) ** q / q,
        lambda s: np.abs(s) ** (p - 1) + a_max * np.abs(s) ** (q - 1),
        label=f"double_phase_upper:{p:g},{q:g}",
    )
    return NFunction(
        lambda t, x, r: r**p / p + coeff(t, x) * r**q / q,
        lower,
        upper,
        label=f"double_phase:{p:g},{q:g}",
    )


# -- space-time fields and modulars ------------------------------------------


@dataclass(frozen=True)
class SpaceTimeField:
    """Samples of ``f`` on a tensor quadrature grid of ``Q_T``.

    ``values`` has shape ``(nt, *space)`` for scalar fields or
    ``(nt, d, *space)`` when ``vector`` is set. ``times`` are the time
    quadrature nodes, ``coords`` the spatial nodes (broadcast to ``space``)
    and ``weight`` the constant cell volume ``dt * h^d``.
    """

    values: Array
    times: Array
    coords: tuple[Array, ...]
    weight: float
    vector: bool = False

    def magnitude(self) -> Array:
        v = np.asarray(self.values, dtype=float)
        return np.sqrt((v**2).sum(axis=1)) if self.vector else np.abs(v)

    def scaled(self, c: float) -> "SpaceTimeField":
        return SpaceTimeField(self.values * c, self.times, self.coords, self.weight, self.vector)

    @classmethod
    def sample(cls, func, T: float, nt: int, extent=(0.0, 1.0), n: int = 64, dim: int = 1):
        """Midpoint samples of ``func(t, *x)`` on ``(0,T) x extent^dim``."""
        dt = T / nt
        h = (extent[1] - extent[0]) / n
        t = (np.arange(nt) + 0.5) * dt
        xs = extent[0] + (np.arange(n) + 0.5) * h
        coords = tuple(np.meshgrid(*([xs] * dim), indexing="ij"))
        tt = t.reshape((nt,) + (1,) * dim)
        vals = np.asarray(func(tt, *coords), dtype=float) * np.ones((nt,) + (n,) * dim)
        return cls(vals, t, coords, dt * h**dim)

    @property
    def measure(self) -> float:
        space = self.values.shape[2:] if self.vector else self.values.shape[1:]
        return self.weight * self.values.shape[0] * int(np.prod(space))


def modular(M: NFunction, f: SpaceTimeField) -> float:
    """Midpoint quadrature of ``M(t, x, |f|)`` over ``Q_T``."""
    r = f.magnitude()
    total = 0.0
    with np.errstate(over="ignore"):
        for i, t in enumerate(f.times):
            total += float(np.sum(M(t, f.coords, r[i])))
    total *= f.weight
    if not math.isfinite(total):
        raise ModularOverflow(f"modular of {M.label} is not finite")
    return total


def _modular_or_inf(M, f, lam):
    try:
        return modular(M, f.scaled(1.0 / lam))
    except ModularOverflow:
        return math.inf


def luxemburg_norm(M: NFunction, f: SpaceTimeField, rtol: float = 1e-12,
                   bracket=(1e-12, 1e12)) -> float:
    """``inf{lam > 0 : modular(f/lam) <= 1}`` by bisection in ``log(lam)``."""
    if not np.any(f.magnitude() > 0):
        return 0.0
    lo, hi = bracket
    if _modular_or_inf(M, f, hi) > 1.0:
        hi = hi * hi  # one expansion of the cap
        if _modular_or_inf(M, f, hi) > 1.0:
            raise NotInSpace(f"modular(f/lam) > 1 up to lam={hi:g} for {M.label}")
    if _modular_or_inf(M, f, lo) <= 1.0:
        return lo
    llo, lhi = math.log(lo), math.log(hi)
    while lhi - llo > rtol:
        mid = 0.5 * (llo + lhi)
        if _modular_or_inf(M, f, math.exp(mid)) > 1.0:
            llo = mid
        else:
            lhi = mid
    return math.exp(lhi)


def holder_defect(M: NFunction, Mstar: NFunction, f: SpaceTimeField, g: SpaceTimeField) -> float:
    """``2 ||f||_M ||g||_{M*} - int f g``; nonnegative by the Hoelder inequality."""
    if f.values.shape != g.values.shape:
        raise ValueError("f and g must share a quadrature grid")
    if f.vector:
        prod = (f.values * g.values).sum(axis=1)
    else:
        prod = f.values * g.values
    inner = float(f.weight * prod.sum())
    return 2.0 * luxemburg_norm(M, f) * luxemburg_norm(Mstar, g) - inner


# -- axiom checks -------------------------------------------------------------


@dataclass
class AxiomReport:
    passed: dict[str, bool]
    worst: dict[str, float]
    witness: dict[str, tuple]

    @property
    def ok(self) -> bool:
        return all(self.passed.values())

    def __str__(self):
        lines = []
        for k, v in self.passed.items():
            lines.append(f"{k:<14} {'PASS' if v else 'FAIL'}  worst={self.worst[k]:.3e}  at {self.witness[k]}")
        return "\n".join(lines)


def check_young_axioms(m: YoungFunction, sample_count: int = 2000, seed: int = 0) -> AxiomReport:
    """Sampled checks of positivity, convexity, superlinearity and ``m'``.

    Superlinearity is a finite proxy: ``m(s)/s`` must grow by a factor 10
    between ``s = 1`` and ``s = 1e3``, and be small near zero.
    """
    if sample_count < 1:
        raise ValueError("sample_count must be >= 1")
    rng = np.random.default_rng(seed)
    s = np.sort(10.0 ** rng.uniform(-3, 3, sample_count))
    passed, worst, witness = {}, {}, {}
    with np.errstate(over="ignore", invalid="ignore"):
        v = m(s)
        fin = np.isfinite(v)
        pos = v[fin]
        i = int(np.argmin(pos)) if pos.size else 0
        passed["positivity"] = bool(pos.size and pos.min() > 0) and float(m(0.0)) == 0.0
        worst["positivity"] = float(pos.min()) if pos.size else math.nan
        witness["positivity"] = (float(s[fin][i]),) if pos.size else ()

        a = s
        b = a * (1 + rng.uniform(0.01, 1.0, a.size))
        c = b + (b - a) * rng.uniform(0.1, 2.0, a.size)
        ma, mb, mc = m(a), m(b), m(c)
        dd = (mc - mb) / (c - b) - (mb - ma) / (b - a)
        # scale-aware slack for the cancellation in the divided differences
        slack = 1e-10 + 1e-12 * np.abs(mc) / np.minimum(c - b, b - a)
        ok = np.isfinite(dd)
        rel = np.where(ok, dd + slack, np.inf)
        j = int(np.argmin(rel))
        passed["convexity"] = bool(rel[j] >= 0)
        worst["convexity"] = float(dd[j]) if ok[j] else math.nan
        witness["convexity"] = (float(a[j]), float(b[j]), float(c[j]))

        r1 = float(m(1.0))
        r_big = float(m(1e3)) / 1e3
        r_small = float(m(1e-6)) / 1e-6
        growth = r_big / r1 if r1 > 0 else math.inf
        passed["superlinear"] = growth >= 10.0 and r_small <= 0.1 * r1
        worst["superlinear"] = growth
        witness["superlinear"] = (1.0, 1e3)

        sd = s[(s >= 1e-3) & (s <= 1e3)]
        step = 1e-6 * sd
        fd = (m(sd + step) - m(sd - step)) / (2 * step)
        an = m.deriv(sd)
        good = np.isfinite(fd) & np.isfinite(an) & (np.abs(an) < 1e250)
        relerr = np.abs(fd[good] - an[good]) / np.maximum(np.abs(an[good]), 1e-300)
        k = int(np.argmax(relerr)) if relerr.size else 0
        passed["derivative"] = bool(relerr.size == 0 or relerr[k] <= 1e-6)
        worst["derivative"] = float(relerr[k]) if relerr.size else 0.0
        witness["derivative"] = (float(sd[good][k]),) if relerr.size else ()
    return AxiomReport(passed, worst, witness)


def check_nfunction_bounds(M: NFunction, sample_count: int = 2000, T: float = 1.0,
                           extent=(0.0, 1.0), dim: int = 1, seed: int = 0) -> AxiomReport:
    """Sampled sandwich ``lower <= M <= upper`` and convexity in ``r``."""
    rng = np.random.default_rng(seed)
    t = rng.uniform(0, T, sample_count)
    x = tuple(rng.uniform(*extent, sample_count) for _ in range(dim))
    r = 10.0 ** rng.uniform(-3, 2, sample_count)
    passed, worst, witness = {}, {}, {}
    with np.errstate(over="ignore", invalid="ignore"):
        Mv = M(t, x, r)
        lo = M.lower(r)
        up = M.upper(r)
        tol = 1e-12 * np.maximum(1.0, np.abs(Mv))
        gap_lo = Mv - lo + tol
        gap_up = up - Mv + tol
        for name, gap in (("lower_bound", gap_lo), ("upper_bound", gap_up)):
            i = int(np.nanargmin(gap))
            passed[name] = bool(gap[i] >= 0)
            worst[name] = float(gap[i])
            witness[name] = (float(t[i]),) + tuple(float(c[i]) for c in x) + (float(r[i]),)
        r2 = r * (1 + rng.uniform(0.01, 1.0, r.size))
        r3 = r2 + (r2 - r) * rng.uniform(0.1, 2.0, r.size)
        dd = (M(t, x, r3) - M(t, x, r2)) / (r3 - r2) - (M(t, x, r2) - Mv) / (r2 - r)
        slack = 1e-10 + 1e-12 * np.abs(M(t, x, r3)) / np.minimum(r3 - r2, r2 - r)
        i = int(np.nanargmin(dd + slack))
        passed["convexity"] = bool(dd[i] + slack[i] >= 0)
        worst["convexity"] = float(dd[i])
        witness["convexity"] = (float(t[i]), float(r[i]), float(r2[i]), float(r3[i]))
    return AxiomReport(passed, worst, witness)


def spatial_ratio_diagnostic(M: NFunction, t: float, x, y, r) -> Array:
    """``M(t, x, r) / M(t, y, r)``.

    A sampled look at how fast ``M`` varies in space; it does not certify
    any limsup regularity condition.
    """
    r = np.asarray(r, dtype=float)
    return M(t, x, r) / M(t, y, r)
