"""Monotone fluxes ``A(t, x, xi)``, their regularisation, truncations and
sampled checks of the structural assumptions on ``A``.

Gradients are arrays with a leading component axis of length ``d``; ``x``
is always a tuple of coordinate arrays broadcastable against ``xi[0]``.
"""
from __future__ import annotations

import bisect
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .orlicz import NFunction, YoungFunction

Array = np.ndarray


# -- exponent fields ---------------------------------------------------------


@dataclass(frozen=True)
class ExponentPiece:
    """``p(x) = c0 + c1 x_1 (+ c2 x_2)`` on one time interval."""

    coeffs: tuple[float, ...]

    def __call__(self, x) -> Array:
        out = np.full(np.shape(x[0]), float(self.coeffs[0]))
        for c, xi in zip(self.coeffs[1:], x):
            out = out + c * xi
        return out


@dataclass(frozen=True)
class ExponentField:
    """Exponent ``p(t, x)``, piecewise in time and constant or affine in space.

    Piece ``i`` is active on ``(b_{i-1}, b_i]`` with ``b_{-1} = -inf`` and
    the last piece extending to ``+inf``. Intervals are closed on the right,
    so a backward-Euler step ending at a breakpoint still sees the
    exponent of the interval it closes.
    """

    breakpoints: tuple[float, ...]
    pieces: tuple[ExponentPiece, ...]

    def __post_init__(self):
        if len(self.pieces) != len(self.breakpoints) + 1:
            raise ValueError("need exactly one more piece than breakpoints")
        if any(b2 <= b1 for b1, b2 in zip(self.breakpoints, self.breakpoints[1:])):
            raise ValueError("breakpoints must increase")

    @classmethod
    def constant(cls, p: float) -> "ExponentField":
        return cls((), (ExponentPiece((float(p),)),))

    @classmethod
    def piecewise(cls, breakpoints: Sequence[float], values: Sequence) -> "ExponentField":
        pieces = tuple(
            ExponentPiece(tuple(np.atleast_1d(np.asarray(v, dtype=float)).tolist())) for v in values
        )
        return cls(tuple(float(b) for b in breakpoints), pieces)

    def piece_index(self, t: float) -> int:
        return bisect.bisect_left(self.breakpoints, t)

    def __call__(self, t: float, x) -> Array:
        return self.pieces[self.piece_index(t)](x)

    def restrict(self, t0: float, t1: float) -> "ExponentField":
        """The field with only the pieces active on ``(t0, t1]``."""
        i0, i1 = self.piece_index(np.nextafter(t0, np.inf)), self.piece_index(t1)
        return ExponentField(self.breakpoints[i0:i1], self.pieces[i0 : i1 + 1])

    def bounds(self, extent=(0.0, 1.0), dim: int = 1) -> tuple[float, float]:
        corners = np.array(np.meshgrid(*([list(extent)] * dim), indexing="ij")).reshape(dim, -1)
        vals = np.concatenate([piece(tuple(corners)) for piece in self.pieces])
        return float(vals.min()), float(vals.max())


# -- fluxes -------------------------------------------------------------------


@dataclass(frozen=True)
class Flux:
    """Monotone flux with optional potential and Jacobian.

    ``eval(t, x, xi)`` returns ``A`` with the shape of ``xi``;
    ``potential(t, x, xi)`` returns ``Phi`` with ``grad_xi Phi = A``;
    ``jacobian(t, x, xi)`` returns ``dA/dxi`` with shape ``(d, d, ...)``.
    ``linear_coefficient(t)``, when given, returns ``k`` if ``A(t, ., xi) = k xi``
    at time ``t`` and ``None`` otherwise, so the implicit step can reuse one
    factorisation on linear stretches.
    """

    eval: Callable
    potential: Callable | None = None
    jacobian: Callable | None = None
    label: str = "A"
    linear_coefficient: Callable[[float], float | None] | None = None

    def __call__(self, t, x, xi):
        return self.eval(t, x, np.asarray(xi, dtype=float))


def _norm_sq(xi: Array) -> Array:
    return (xi * xi).sum(axis=0)


def _radial_jacobian(kappa: Array, dkappa_dr2: Array, xi: Array) -> Array:
    """Jacobian of ``kappa(|xi|^2) xi``: ``kappa I + 2 kappa' xi xi^T``."""
    d = xi.shape[0]
    J = 2.0 * dkappa_dr2 * xi[:, None] * xi[None, :]
    for i in range(d):
        J[i, i] = J[i, i] + kappa
    return J


def plaplace_flux(p, delta_reg: float = 0.0) -> Flux:
    """``(delta^2 + |xi|^2)^((p-2)/2) xi`` with ``A(., 0) = 0`` when ``delta = 0``.

    ``p`` is a number or an :class:`ExponentField`.
    """
    field_ = p if isinstance(p, ExponentField) else ExponentField.constant(float(p))
    for piece in field_.pieces:
        if len(piece.coeffs) == 1 and piece.coeffs[0] <= 1:
            raise ValueError(f"exponent must exceed 1, got {piece.coeffs[0]}")
    d2 = float(delta_reg) ** 2

    def exponent(t, x, shape):
        piece = field_.pieces[field_.piece_index(t)]
        if len(piece.coeffs) == 1:
            return piece.coeffs[0]
        pe = np.broadcast_to(piece(x), shape)
        if np.any(pe <= 1):
            raise ValueError("exponent field drops to <= 1")
        return pe

    def kappa(t, x, xi):
        r2 = _norm_sq(xi) + d2
        pe = exponent(t, x, r2.shape)
        with np.errstate(divide="ignore", invalid="ignore"):
            k = np.power(r2, (pe - 2.0) / 2.0)
        return np.where(r2 > 0, k, 0.0), r2, pe

    def ev(t, x, xi):
        piece = field_.pieces[field_.piece_index(t)]
        if piece.coeffs == (2.0,) and d2 == 0:
            return np.array(xi, dtype=float)
        k, _, _ = kappa(t, x, xi)
        out = k * xi
        return np.where(np.isfinite(out), out, 0.0)

    def pot(t, x, xi):
        r2 = _norm_sq(xi) + d2
        pe = exponent(t, x, r2.shape)
        base = np.power(d2, pe / 2.0) / pe if d2 > 0 else 0.0
        return np.power(r2, pe / 2.0) / pe - base

    def jac(t, x, xi):
        k, r2, pe = kappa(t, x, xi)
        with np.errstate(divide="ignore", invalid="ignore"):
            dk = np.where(r2 > 0, (pe - 2.0) / 2.0 * np.power(r2, (pe - 4.0) / 2.0), 0.0)
        J = _radial_jacobian(k, dk, xi)
        # p < 2 is singular at xi = 0; cap so Newton stays finite
        return np.nan_to_num(J, nan=0.0, posinf=1e300, neginf=-1e300)

    def linear(t):
        piece = field_.pieces[field_.piece_index(t)]
        return 1.0 if piece.coeffs == (2.0,) and d2 == 0 else None
    label = f"plaplace:{field_.pieces[0].coeffs[0]:g}" if not field_.breakpoints else "plaplace:piecewise"
    return Flux(ev, pot, jac, label=label, linear_coefficient=linear)


def linear_flux(coefficient: float = 1.0) -> Flux:
    """``A = k xi``."""
    k = float(coefficient)
    if k <= 0:
        raise ValueError("linear flux needs a positive coefficient")
    return Flux(
        lambda t, x, xi: k * xi,
        lambda t, x, xi: 0.5 * k * _norm_sq(xi),
        lambda t, x, xi: _radial_jacobian(np.full(xi.shape[1:], k), np.zeros(xi.shape[1:]), xi),
        label=f"linear:{k:g}",
        linear_coefficient=lambda t: k,
    )


def double_phase_flux(p: float, q: float, a=1.0) -> Flux:
    """``|xi|^(p-2) xi + a(t,x) |xi|^(q-2) xi``; ``a`` constant or ``a(t, x)``."""
    if p <= 1:
        raise ValueError(f"p must exceed 1, got {p}")
    if q < p:
        raise ValueError(f"double phase needs q >= p, got p={p}, q={q}")
    coeff = a if callable(a) else (lambda t, x, c=float(a): c)
    if not callable(a) and a < 0:
        raise ValueError("double phase weight must be nonnegative")

    def parts(t, x, xi):
        r2 = _norm_sq(xi)
        av = np.broadcast_to(coeff(t, x), r2.shape)
        with np.errstate(divide="ignore", invalid="ignore"):
            kp = np.where(r2 > 0, np.power(r2, (p - 2) / 2), 0.0)
            kq = np.where(r2 > 0, np.power(r2, (q - 2) / 2), 0.0)
        return r2, av, kp, kq

    def ev(t, x, xi):
        _, av, kp, kq = parts(t, x, xi)
        return (kp + av * kq) * xi

    def pot(t, x, xi):
        r2 = _norm_sq(xi)
        av = np.broadcast_to(coeff(t, x), r2.shape)
        return np.power(r2, p / 2) / p + av * np.power(r2, q / 2) / q

    def jac(t, x, xi):
        r2, av, kp, kq = parts(t, x, xi)
        with np.errstate(divide="ignore", invalid="ignore"):
            dkp = np.where(r2 > 0, (p - 2) / 2 * np.power(r2, (p - 4) / 2), 0.0)
            dkq = np.where(r2 > 0, (q - 2) / 2 * np.power(r2, (q - 4) / 2), 0.0)
        J = _radial_jacobian(kp + av * kq, dkp + av * dkq, xi)
        return np.nan_to_num(J, nan=0.0, posinf=1e300, neginf=-1e300)

    return Flux(ev, pot, jac, label=f"double_phase:{p:g},{q:g}")


def regularize(A: Flux, eps: float, m: YoungFunction) -> Flux:
    """``A + eps * grad_xi m(|xi|)``, zero extra contribution at ``xi = 0``."""
    if eps < 0:
        raise ValueError("eps must be nonnegative")
    if eps == 0:
        return A

    def extra_kappa(xi):
        r = np.sqrt(_norm_sq(xi))
        with np.errstate(divide="ignore", invalid="ignore"):
            k = np.where(r > 0, m.deriv(r) / r, 0.0)
        return r, k

    def ev(t, x, xi):
        _, k = extra_kappa(xi)
        return A.eval(t, x, xi) + eps * k * xi

    pot = None
    if A.potential is not None:
        pot = lambda t, x, xi: A.potential(t, x, xi) + eps * m(np.sqrt(_norm_sq(xi)))  # noqa: E731

    jac = None
    if A.jacobian is not None:

        def jac(t, x, xi):
            r, k = extra_kappa(xi)
            with np.errstate(divide="ignore", invalid="ignore"):
                # d kappa / d(r^2) = (m'' - m'/r) / (2 r^2)
                dk = np.where(r > 0, (m.second_derivative(r) - k) / (2 * r * r), 0.0)
            J = _radial_jacobian(k, dk, xi)
            return A.jacobian(t, x, xi) + eps * np.nan_to_num(J, nan=0.0, posinf=1e300)

    return Flux(ev, pot, jac, label=f"{A.label}+{eps:g}*grad {m.label}")


# -- truncations ----------------------------------------------------------------


@dataclass(frozen=True)
class TruncationFamily:
    k: float
    delta: float = 0.0

    def __post_init__(self):
        if self.k <= 0:
            raise ValueError("truncation level must be positive")
        if self.delta < 0:
            raise ValueError("smoothing width must be nonnegative")


def truncate(family: TruncationFamily, z):
    """``(T_k(z), G_k(z))`` with ``G_k`` the primitive vanishing at 0."""
    z = np.asarray(z, dtype=float)
    k = family.k
    a = np.abs(z)
    T = np.clip(z, -k, k)
    G = np.where(a <= k, 0.5 * z * z, k * a - 0.5 * k * k)
    return T, G


def truncate_derivative(family: TruncationFamily, z):
    """``T_k'(z)``: 1 strictly inside the level, 0 outside."""
    return (np.abs(np.asarray(z, dtype=float)) < family.k).astype(float)


def _smoothstep(r):
    return 3 * r**2 - 2 * r**3


def truncate_smooth(family: TruncationFamily, z):
    """``(T_{k,d}, T'_{k,d}, G_{k,d})`` for the smoothstep construction.

    On the band ``k < |z| < k + d`` the slope is ``1 - S(s/d)`` with
    ``S(r) = 3r^2 - 2r^3``; this is C2, concave on the positive axis, and
    ``|T''| <= 1.5/d``.
    """
    if family.delta <= 0:
        raise ValueError("smooth truncation needs delta > 0")
    z = np.asarray(z, dtype=float)
    k, dl = family.k, family.delta
    a = np.abs(z)
    sg = np.sign(z)
    r = np.clip((a - k) / dl, 0.0, 1.0)
    s = r * dl
    top = k + dl / 2
    T_band = k + s - dl * (r**3 - 0.5 * r**4)
    T = np.where(a <= k, z, sg * np.where(a >= k + dl, top, T_band))
    dT = np.where(a <= k, 1.0, np.where(a >= k + dl, 0.0, 1.0 - _smoothstep(r)))
    G_band = 0.5 * k * k + k * s + 0.5 * s * s - dl * dl * (r**4 / 4 - r**5 / 10)
    G_edge = 0.5 * k * k + k * dl + 0.35 * dl * dl
    G = np.where(a <= k, 0.5 * z * z, np.where(a >= k + dl, G_edge + top * (a - k - dl), G_band))
    return T, dT, G


# -- sampled assumption checks ---------------------------------------------------


@dataclass
class SampleReport:
    name: str
    passed: bool
    worst: float
    witness: dict = field(default_factory=dict)
    samples: int = 0

    def __str__(self):
        return f"{self.name:<24} {'PASS' if self.passed else 'FAIL'}  worst={self.worst:.3e}  n={self.samples}"


def _sample_points(rng, samples, dim, T, extent, scale):
    t = rng.uniform(0, T, samples)
    x = tuple(rng.uniform(*extent, samples) for _ in range(dim))
    xi = rng.normal(0.0, scale, (dim, samples))
    return t, x, xi


def _pointwise(fn, t, x, xi):
    """Evaluate ``fn`` at per-sample times (fluxes take a scalar ``t``)."""
    ut = np.unique(t)
    if ut.size == 1:
        return fn(float(ut[0]), x, xi)
    out = None
    for tv in ut:
        sel = t == tv
        val = fn(float(tv), tuple(c[sel] for c in x), xi[..., sel])
        if out is None:
            out = np.zeros(np.shape(val)[:-1] + t.shape)
        out[..., sel] = val
    return out


def verify_coercivity(A: Flux, M: NFunction, Mstar: NFunction, c: float = 1.0, g=None,
                      samples: int = 10_000, dim: int = 2, T: float = 1.0,
                      extent=(0.0, 1.0), scale: float = 2.0, seed: int = 0,
                      tol: float = 1e-9) -> SampleReport:
    """Margin of ``c A.xi + g - M(|xi|) - M*(|A|)`` over random points.

    Times are drawn from a small set of values so the flux sees scalar ``t``.
    """
    if samples < 1:
        raise ValueError("samples must be >= 1")
    rng = np.random.default_rng(seed)
    t, x, xi = _sample_points(rng, samples, dim, T, extent, scale)
    t = np.round(t * 8) / 8
    Av = _pointwise(A.eval, t, x, xi)
    gv = 0.0 if g is None else (g(t, x) if callable(g) else float(g))
    rA = np.sqrt(_norm_sq(Av))
    rx = np.sqrt(_norm_sq(xi))
    margin = c * (Av * xi).sum(axis=0) + gv - M(t, x, rx) - Mstar(t, x, rA)
    i = int(np.argmin(margin))
    return SampleReport(
        "coercivity",
        bool(margin[i] >= -tol),
        float(margin[i]),
        {"t": float(t[i]), "x": tuple(float(v[i]) for v in x), "xi": xi[:, i].tolist(),
         "max_abs_margin": float(np.max(np.abs(margin)))},
        samples,
    )


def verify_monotonicity(A: Flux, samples: int = 10_000, dim: int = 2, T: float = 1.0,
                        extent=(0.0, 1.0), scale: float = 2.0, seed: int = 0) -> SampleReport:
    """Minimum of ``(A(xi1) - A(xi2)).(xi1 - xi2)`` over random distinct pairs."""
    rng = np.random.default_rng(seed)
    t, x, xi1 = _sample_points(rng, samples, dim, T, extent, scale)
    t = np.round(t * 8) / 8
    xi2 = rng.normal(0.0, scale, xi1.shape)
    prod = ((_pointwise(A.eval, t, x, xi1) - _pointwise(A.eval, t, x, xi2)) * (xi1 - xi2)).sum(axis=0)
    i = int(np.argmin(prod))
    return SampleReport(
        "monotonicity",
        bool(prod[i] > 0),
        float(prod[i]),
        {"xi1": xi1[:, i].tolist(), "xi2": xi2[:, i].tolist(), "t": float(t[i])},
        samples,
    )


def bounded_flux_bound(A: Flux, K: float, samples: int = 10_000, dim: int = 2, T: float = 1.0,
                       extent=(0.0, 1.0), seed: int = 0) -> float:
    """Empirical ``sup |A(t, x, xi)|`` over ``|xi| <= K``.

    Half the samples sit on the sphere ``|xi| = K`` where radial fluxes peak.
    """
    if K < 0:
        raise ValueError("K must be nonnegative")
    if K == 0:
        return float(np.max(np.abs(A.eval(0.0, (np.zeros(1),) * dim, np.zeros((dim, 1))))))
    rng = np.random.default_rng(seed)
    t = np.round(rng.uniform(0, T, samples) * 8) / 8
    x = tuple(rng.uniform(*extent, samples) for _ in range(dim))
    direction = rng.normal(size=(dim, samples))
    direction /= np.sqrt(_norm_sq(direction))
    radius = K * np.where(np.arange(samples) % 2 == 0, 1.0, rng.uniform(0, 1, samples) ** (1 / dim))
    Av = _pointwise(A.eval, t, x, direction * radius)
    return float(np.max(np.sqrt(_norm_sq(Av))))


def potential_consistency(A: Flux, samples: int = 1000, dim: int = 2, seed: int = 0,
                          scale: float = 2.0) -> float:
    """Worst relative gap between ``A`` and central differences of its potential."""
    if A.potential is None:
        raise ValueError(f"{A.label} has no potential")
    rng = np.random.default_rng(seed)
    x = tuple(rng.uniform(0, 1, samples) for _ in range(dim))
    xi = rng.normal(0.0, scale, (dim, samples))
    t = 0.5
    Av = A.eval(t, x, xi)
    worst = 0.0
    for i in range(dim):
        h = 1e-6 * np.maximum(np.abs(xi[i]), 1.0)
        e = np.zeros_like(xi)
        e[i] = h
        fd = (A.potential(t, x, xi + e) - A.potential(t, x, xi - e)) / (2 * h)
        err = np.abs(fd - Av[i]) / np.maximum(np.sqrt(_norm_sq(Av)), 1e-8)
        worst = max(worst, float(err.max()))
    return worst
