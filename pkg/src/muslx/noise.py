"""Truncated Q-Wiener noise, diagonal noise maps ``h_j(t, x, u)`` and
Monte Carlo increments with scheduler-independent seeding.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .grid import Domain, SineBasis

Array = np.ndarray


# -- Brownian increments --------------------------------------------------------


def mode_stream(seed: int, path_index: int, mode: int) -> np.random.Generator:
    """Philox generator keyed by ``(seed, path, mode)``; step ``m`` is draw ``m``."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, path_index, mode])))


@dataclass(frozen=True)
class WienerDraw:
    """Increments ``dbeta[m, j] ~ N(0, dt)`` for steps ``m`` and modes ``j``.

    Column ``j`` depends only on ``(seed, path_index, j)``, so draws for a
    smaller mode count are a prefix of draws for a larger one, and the
    first ``M`` steps do not depend on the total step count.
    """

    increments: Array
    dt: float
    seed: int
    path_index: int

    @property
    def steps(self) -> int:
        return self.increments.shape[0]

    @property
    def modes(self) -> int:
        return self.increments.shape[1]

    def brownian(self) -> Array:
        """``beta_j(t_m)`` for ``m = 0..steps``."""
        return np.vstack([np.zeros((1, self.modes)), np.cumsum(self.increments, axis=0)])

    def coarsen(self, factor: int) -> "WienerDraw":
        """Same Brownian path observed every ``factor`` steps."""
        if self.steps % factor:
            raise ValueError(f"{self.steps} steps not divisible by {factor}")
        inc = self.increments.reshape(self.steps // factor, factor, self.modes).sum(axis=1)
        return WienerDraw(inc, self.dt * factor, self.seed, self.path_index)

    def window(self, start: int, stop: int) -> "WienerDraw":
        return WienerDraw(self.increments[start:stop], self.dt, self.seed, self.path_index)

    def truncate_modes(self, N: int) -> "WienerDraw":
        return WienerDraw(self.increments[:, :N], self.dt, self.seed, self.path_index)


def sample_increments(seed: int, path_index: int, steps: int, N: int, dt: float) -> WienerDraw:
    if N < 1:
        raise ValueError("need at least one mode")
    if dt <= 0:
        raise ValueError("dt must be positive")
    if steps < 0:
        raise ValueError("steps must be nonnegative")
    inc = np.empty((steps, N))
    sd = np.sqrt(dt)
    for j in range(N):
        inc[:, j] = sd * mode_stream(seed, path_index, j + 1).standard_normal(steps)
    return WienerDraw(inc, dt, seed, path_index)


# -- noise models -------------------------------------------------------------------


@dataclass(frozen=True)
class NoiseModel:
    """Mode maps ``h_j(t, x, lam)`` for ``j = 1..N``.

    ``func(t, x, lam)`` returns an array of shape ``(N,) + lam.shape`` where
    ``x`` is a tuple of coordinate arrays matching ``lam``. The declared
    constants are checked, not trusted, by :func:`verify_h_assumptions`.
    """

    func: Callable
    modes: int
    additive: bool
    C1: float = 0.0
    C2: float = 0.0
    C3: Callable | float = 0.0
    label: str = "h"
    time_dependent: bool = True

    def __call__(self, t, x, lam) -> Array:
        lam = np.asarray(lam, dtype=float)
        out = np.asarray(self.func(t, x, lam), dtype=float)
        return np.broadcast_to(out, (self.modes,) + lam.shape)

    def c3(self, x) -> Array:
        return self.C3(x) if callable(self.C3) else np.full(np.shape(x[0]), float(self.C3))


def zero_noise(N: int = 1) -> NoiseModel:
    return NoiseModel(lambda t, x, lam: np.zeros((N,) + lam.shape), N, True, label="zero",
                      time_dependent=False)


def _mode_stack(basis: SineBasis, coeffs: Array, x) -> Array:
    return coeffs.reshape((-1,) + (1,) * np.ndim(x[0])) * basis.modes(len(coeffs), x)


def diagonal_additive(basis: SineBasis, coeffs: Sequence[float]) -> NoiseModel:
    """``h_j = c_j e_j``."""
    c = np.asarray(coeffs, dtype=float)
    sup_e2 = 2.0 / basis.domain.length if basis.domain.dim == 1 else (2.0 / basis.domain.length) ** 2
    return NoiseModel(
        lambda t, x, lam: _mode_stack(basis, c, x) * np.ones_like(lam),
        len(c), True, C1=0.0, C2=0.0, C3=float(np.sum(c**2) * sup_e2),
        label=f"additive[{len(c)}]", time_dependent=False,
    )


def diagonal_multiplicative(basis: SineBasis, coeffs: Sequence[float]) -> NoiseModel:
    """``h_j(lam) = c_j lam e_j``."""
    c = np.asarray(coeffs, dtype=float)
    sup_e2 = 2.0 / basis.domain.length if basis.domain.dim == 1 else (2.0 / basis.domain.length) ** 2
    C = float(np.sum(c**2) * sup_e2)
    return NoiseModel(
        lambda t, x, lam: _mode_stack(basis, c, x) * lam,
        len(c), False, C1=C, C2=C, C3=0.0,
        label=f"multiplicative[{len(c)}]", time_dependent=False,
    )


def geometric(N: int, ratio: float = 0.5, scale: float = 1.0) -> Array:
    """``scale * ratio**j`` for ``j = 1..N``."""
    return scale * ratio ** np.arange(1, N + 1, dtype=float)


def apply_noise(h: NoiseModel, domain: Domain, u: Array, t: float, dbeta: Array) -> Array:
    """``sum_j h_j(t, x, u(x)) dbeta_j`` at the interior nodes."""
    dbeta = np.asarray(dbeta, dtype=float)
    if dbeta.shape != (h.modes,):
        raise ValueError(f"noise has {h.modes} modes but increments have shape {dbeta.shape}")
    if u.shape != domain.shape:
        raise ValueError(f"state shape {u.shape} does not match grid {domain.shape}")
    return np.tensordot(dbeta, h(t, domain.nodes, u), axes=1)


def hs_norm_sq(h: NoiseModel, domain: Domain, t: float, u: Array) -> float:
    """``sum_j ||h_j(t, ., u)||^2`` in discrete L2."""
    vals = h(t, domain.nodes, u)
    return float(domain.weight * np.sum(vals * vals))


def elementary_approximation(h: NoiseModel, partition: Sequence[float]) -> NoiseModel:
    """Freeze ``h`` at the left end of each cell ``(t_l, t_{l+1}]``."""
    pts = np.asarray(partition, dtype=float)
    if pts.size < 2:
        raise ValueError("partition needs at least two points")
    if np.any(np.diff(pts) <= 0):
        raise ValueError("partition must increase")

    def frozen(t, x, lam):
        i = int(np.clip(np.searchsorted(pts, t, side="left") - 1, 0, pts.size - 2))
        return h.func(float(pts[i]), x, lam)

    return NoiseModel(frozen, h.modes, h.additive, h.C1, h.C2, h.C3,
                      label=f"elementary({h.label})")


def elementary_defect_sq(h: NoiseModel, partition: Sequence[float], domain: Domain,
                         T: float, nt: int = 4000, u: Array | None = None) -> float:
    """``int_0^T ||h~ - h||_HS^2 dt`` by midpoint quadrature."""
    hz = elementary_approximation(h, partition)
    u = domain.zeros() if u is None else u
    dt = T / nt
    total = 0.0
    for t in (np.arange(nt) + 0.5) * dt:
        diff = hz(t, domain.nodes, u) - h(t, domain.nodes, u)
        total += domain.weight * float(np.sum(diff * diff))
    return total * dt


@dataclass
class NoiseReport:
    passed: dict[str, bool]
    worst_ratio: dict[str, float]
    witness: dict[str, tuple] = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return all(self.passed.values())


def verify_h_assumptions(h: NoiseModel, domain: Domain, samples: int = 2000, T: float = 1.0,
                         lam_range: float = 100.0, seed: int = 0) -> NoiseReport:
    """Sampled growth and Lipschitz checks against the declared constants.

    Reports the worst ratio ``lhs / rhs`` for each bound (``<= 1`` passes).
    """
    rng = np.random.default_rng(seed)
    lo, hi = domain.extent
    x = tuple(rng.uniform(lo, hi, samples) for _ in range(domain.dim))
    t = rng.uniform(0, T, samples)
    lam1 = rng.uniform(-lam_range, lam_range, samples)
    lam2 = rng.uniform(-lam_range, lam_range, samples)
    H1 = np.stack([h(tv, tuple(np.atleast_1d(c[i]) for c in x), np.atleast_1d(lam1[i]))[:, 0]
                   for i, tv in enumerate(t)], axis=1)
    H2 = np.stack([h(tv, tuple(np.atleast_1d(c[i]) for c in x), np.atleast_1d(lam2[i]))[:, 0]
                   for i, tv in enumerate(t)], axis=1)
    tiny = 1e-300
    growth_lhs = np.sum(H1 * H1, axis=0)
    growth_rhs = h.C1 * lam1**2 + h.c3(x)
    g_ratio = np.where(growth_lhs > 0, growth_lhs / np.maximum(growth_rhs, tiny), 0.0)
    lip_lhs = np.sum((H1 - H2) ** 2, axis=0)
    lip_rhs = h.C2 * (lam1 - lam2) ** 2
    l_ratio = np.where(lip_lhs > 1e-28, lip_lhs / np.maximum(lip_rhs, tiny), 0.0)
    ig, il = int(np.argmax(g_ratio)), int(np.argmax(l_ratio))
    slack = 1.0 + 1e-9
    return NoiseReport(
        {"growth": bool(g_ratio[ig] <= slack), "lipschitz": bool(l_ratio[il] <= slack)},
        {"growth": float(g_ratio[ig]), "lipschitz": float(l_ratio[il])},
        {"growth": (float(t[ig]), float(lam1[ig])), "lipschitz": (float(lam1[il]), float(lam2[il]))},
    )
