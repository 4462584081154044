"""Semi-implicit Euler-Maruyama for ``du - div A(t, x, grad u) dt = h(u) dW``.

The drift is taken backward (one convex minimisation or Newton solve per
step), the noise forward at the left endpoint. Every step appends to an
energy ledger whose columns feed the identities checked in
:mod:`muslx.verify`.
"""
from __future__ import annotations

import csv
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np
import scipy.sparse as sp
from scipy.linalg import solve_banded
from scipy.sparse.linalg import splu, spsolve

from .grid import Domain, SineBasis, divergence, gradient, l2_inner, l2_norm_sq
from .noise import NoiseModel, WienerDraw, apply_noise, hs_norm_sq, sample_increments, zero_noise
from .operators import Flux, regularize
from .orlicz import YoungFunction

Array = np.ndarray

LEDGER_COLUMNS = ("step", "t", "norm_sq", "dissipation_acc", "hs_acc", "stoch_acc")


class SolverError(RuntimeError):
    def __init__(self, message: str, step: int | None = None):
        super().__init__(message if step is None else f"step {step}: {message}")
        self.step = step


class NewtonDiverged(SolverError):
    pass


class NonfiniteState(SolverError):
    pass


class NoContraction(SolverError):
    pass


@dataclass(frozen=True)
class SolverConfig:
    domain: Domain
    flux: Flux
    u0: Array
    T: float
    dt: float
    noise: NoiseModel | None = None
    eps: float = 0.0
    young: YoungFunction | None = None
    newton_tol: float = 1e-10
    newton_max: int = 50
    paths: int = 1
    seed: int = 0
    keep_trajectory: bool = False

    def __post_init__(self):
        if not (self.T > 0 and self.dt > 0):
            raise ValueError("T and dt must be positive")
        if self.newton_tol <= 0 or self.newton_max < 1:
            raise ValueError("Newton tolerance and iteration cap must be positive")
        if self.eps > 0 and self.young is None:
            raise ValueError("eps > 0 needs a Young function for the regularisation")
        if np.shape(self.u0) != self.domain.shape:
            raise ValueError(f"u0 shape {np.shape(self.u0)} does not match grid {self.domain.shape}")

    @property
    def steps(self) -> int:
        M = self.T / self.dt
        n = int(round(M))
        if abs(M - n) > 1e-9 * max(1.0, M):
            raise ValueError(f"T={self.T} is not a multiple of dt={self.dt}")
        return n

    @property
    def modes(self) -> int:
        return 1 if self.noise is None else self.noise.modes

    def effective_flux(self) -> Flux:
        return regularize(self.flux, self.eps, self.young) if self.eps > 0 else self.flux

    def noise_or_zero(self) -> NoiseModel:
        return self.noise if self.noise is not None else zero_noise(1)

    def draw(self, path_index: int) -> WienerDraw:
        return sample_increments(self.seed, path_index, self.steps, self.modes, self.dt)


@dataclass
class PathResult:
    """Ledger and (optionally) trajectory of one path.

    Ledger row ``m`` holds ``||u^m||^2`` and the accumulated dissipation
    ``sum dt <A(grad u^{i+1}), grad u^{i+1}>``, Hilbert-Schmidt term
    ``sum dt ||h(u^i)||_HS^2`` and stochastic term ``sum <u^i, h(u^i) dW^i>``
    over ``i < m``.
    """

    times: Array
    norm_sq: Array
    dissipation_acc: Array
    hs_acc: Array
    stoch_acc: Array
    final: Array
    u0: Array
    step_identity: Array
    trajectory: Array | None = None
    draw: WienerDraw | None = None
    newton_iterations: int = 0
    path_index: int = 0
    picard_defects: list[float] = field(default_factory=list)

    @property
    def steps(self) -> int:
        return len(self.times) - 1

    def ledger_rows(self):
        for m in range(len(self.times)):
            yield (m, self.times[m], self.norm_sq[m], self.dissipation_acc[m], self.hs_acc[m],
                   self.stoch_acc[m])

    def write_ledger(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(LEDGER_COLUMNS)
            for row in self.ledger_rows():
                w.writerow([row[0]] + [repr(float(v)) for v in row[1:]])

    def write_trajectory(self, domain: Domain, path) -> None:
        if self.trajectory is None:
            raise ValueError("trajectory was not kept")
        flat = self.trajectory.reshape(len(self.times), -1)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "t"] + [f"u{i}" for i in range(flat.shape[1])])
            for m, (t, row) in enumerate(zip(self.times, flat)):
                w.writerow([m, repr(float(t))] + [repr(float(v)) for v in row])


@dataclass
class Ledger:
    """Ledger columns read back from CSV, enough for expectation checks."""

    times: Array
    norm_sq: Array
    dissipation_acc: Array
    hs_acc: Array
    stoch_acc: Array


def read_ledger(path) -> Ledger:
    data = np.genfromtxt(path, delimiter=",", names=True)
    return Ledger(np.atleast_1d(data["t"]), np.atleast_1d(data["norm_sq"]),
                  np.atleast_1d(data["dissipation_acc"]), np.atleast_1d(data["hs_acc"]),
                  np.atleast_1d(data["stoch_acc"]))


# -- the implicit step ---------------------------------------------------------------


@lru_cache(maxsize=32)
def _linear_factor(domain: Domain, dt: float, kappa: float):
    G = domain.grad_matrix
    H = sp.identity(G.shape[1], format="csc") + (dt * kappa) * (G.T @ G).tocsc()
    return splu(H.tocsc())


def _jacobian_matrix(domain: Domain, J: Array) -> sp.csr_matrix:
    d = domain.dim
    if d == 1:
        return sp.diags(J[0, 0].reshape(-1))
    blocks = [[sp.diags(J[i, k].reshape(-1)) for k in range(d)] for i in range(d)]
    return sp.bmat(blocks, format="csr")


def _newton_solve(domain: Domain, J: Array, dt: float, r: Array) -> Array:
    """Solve ``(I + dt G^T diag(J) G) x = r``; tridiagonal banded solve in 1-D."""
    if domain.dim == 1:
        j = (dt / domain.h**2) * J[0, 0]
        ab = np.zeros((3, j.size - 1))
        ab[1] = 1.0 + j[:-1] + j[1:]
        ab[0, 1:] = -j[1:-1]
        ab[2, :-1] = -j[1:-1]
        return solve_banded((1, 1), ab, r.reshape(-1))
    G = domain.grad_matrix
    H = sp.identity(G.shape[1], format="csr") + dt * (G.T @ _jacobian_matrix(domain, J) @ G)
    return spsolve(H.tocsc(), r.reshape(-1))


def _residual(domain, flux, t, dt, v, rhs):
    F = flux.eval(t, domain.centers, gradient(domain, v))
    return v - rhs - dt * divergence(domain, F)


def _objective(domain, flux, t, dt, v, rhs):
    pot = flux.potential(t, domain.centers, gradient(domain, v))
    return 0.5 * float(np.sum((v - rhs) ** 2)) + dt * float(np.sum(pot))


def step_implicit(domain: Domain, u_prev: Array, t_next: float, dt: float, A: Flux,
                  forcing: Array | None = None, tol: float = 1e-10, max_iter: int = 50,
                  step: int | None = None) -> tuple[Array, int]:
    """Backward-Euler step ``u - dt div A(t_next, grad u) = u_prev + forcing``.

    Returns the new state and the number of Newton iterations. With a
    potential the step minimises ``0.5 |v - rhs|^2 + dt sum Phi(grad v)``
    by damped Newton; otherwise Newton is damped on the residual norm.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    rhs = u_prev if forcing is None else u_prev + forcing
    if not np.all(np.isfinite(rhs)):
        raise NonfiniteState("non-finite right-hand side", step)
    scale = tol * (1.0 + math.sqrt(l2_norm_sq(domain, u_prev)))
    w = math.sqrt(domain.weight)

    kappa = A.linear_coefficient(t_next) if A.linear_coefficient is not None else None
    if kappa is not None:
        lu = _linear_factor(domain, float(dt), float(kappa))
        v = lu.solve(rhs.reshape(-1)).reshape(domain.shape)
        r = _residual(domain, A, t_next, dt, v, rhs)
        if w * np.linalg.norm(r) <= scale:
            return v, 1
        # fall through to Newton polishing from the linear solution
    else:
        v = rhs.copy()

    if A.jacobian is None:
        raise ValueError(f"flux {A.label} has no Jacobian for the Newton step")
    r = _residual(domain, A, t_next, dt, v, rhs)
    rn = w * np.linalg.norm(r)
    use_obj = A.potential is not None
    obj = _objective(domain, A, t_next, dt, v, rhs) if use_obj else None
    for it in range(1, max_iter + 1):
        if rn <= scale:
            return v, it - 1
        J = A.jacobian(t_next, domain.centers, gradient(domain, v))
        direction = -_newton_solve(domain, J, dt, r).reshape(domain.shape)
        if not np.all(np.isfinite(direction)):
            raise NonfiniteState("non-finite Newton direction", step)
        alpha = 1.0
        for _ in range(31):
            trial = v + alpha * direction
            with np.errstate(over="ignore", invalid="ignore"):
                r_trial = _residual(domain, A, t_next, dt, trial, rhs)
                rn_trial = w * np.linalg.norm(r_trial)
                obj_trial = _objective(domain, A, t_next, dt, trial, rhs) if use_obj else None
            if np.isfinite(rn_trial):
                if use_obj and obj_trial <= obj + 1e-14 * abs(obj):
                    break
                if rn_trial < rn:
                    break
            alpha *= 0.5
        else:
            raise NewtonDiverged(f"no decrease after 30 halvings (residual {rn:.3e})", step)
        if use_obj and rn_trial > scale:
            # greedy halving: saturating fluxes (p < 2) make full Newton steps
            # overshoot while still decreasing the objective a little
            accepted = alpha
            while alpha > 2.0**-30:
                with np.errstate(over="ignore", invalid="ignore"):
                    probe = _objective(domain, A, t_next, dt, v + 0.5 * alpha * direction, rhs)
                if not probe < obj_trial:
                    break
                alpha *= 0.5
                obj_trial = probe
            if alpha != accepted:
                trial = v + alpha * direction
                r_trial = _residual(domain, A, t_next, dt, trial, rhs)
                rn_trial = w * np.linalg.norm(r_trial)
        v, r, rn, obj = trial, r_trial, rn_trial, obj_trial
    if rn <= scale:
        return v, max_iter
    raise NewtonDiverged(f"residual {rn:.3e} above {scale:.3e} after {max_iter} iterations", step)


# -- path integration ------------------------------------------------------------------


def integrate(domain: Domain, flux: Flux, noise: NoiseModel, u0: Array, t0: float, dt: float,
              draw: WienerDraw | None, steps: int | None = None, *, noise_state: Array | None = None,
              tol: float = 1e-10, max_iter: int = 50, keep_trajectory: bool = False,
              path_index: int = 0) -> PathResult:
    """March ``steps`` backward-Euler / forward-noise steps from ``(t0, u0)``.

    ``noise_state`` replaces the state at which the noise is evaluated
    (shape ``(steps + 1,) + grid``); the Picard loop uses it.
    """
    if steps is None:
        if draw is None:
            raise ValueError("need a draw or an explicit step count")
        steps = draw.steps
    if draw is not None and draw.steps < steps:
        raise ValueError(f"draw has {draw.steps} steps, need {steps}")
    if draw is not None and draw.modes != noise.modes:
        raise ValueError(f"noise has {noise.modes} modes, draw has {draw.modes}")
    times = t0 + dt * np.arange(steps + 1)
    norm_sq = np.empty(steps + 1)
    diss = np.zeros(steps + 1)
    hs = np.zeros(steps + 1)
    stoch = np.zeros(steps + 1)
    ident = np.zeros(steps)
    traj = np.empty((steps + 1,) + domain.shape) if keep_trajectory else None

    # additive, time-independent noise needs only one evaluation of h
    frozen = None
    if noise.additive and not noise.time_dependent:
        frozen = noise(t0, domain.nodes, domain.zeros())
        frozen_hs = float(domain.weight * np.sum(frozen * frozen))
        frozen_flat = frozen.reshape(noise.modes, -1)

    u = np.array(u0, dtype=float)
    norm_sq[0] = l2_norm_sq(domain, u)
    if traj is not None:
        traj[0] = u
    iters = 0
    for m in range(steps):
        t = times[m]
        if draw is None:
            forcing = np.zeros_like(u)
            hs_m = 0.0
        else:
            at = u if noise_state is None else noise_state[m]
            if frozen is not None:
                forcing = (draw.increments[m] @ frozen_flat).reshape(domain.shape)
                hs_m = frozen_hs
            else:
                forcing = apply_noise(noise, domain, at, t, draw.increments[m])
                hs_m = hs_norm_sq(noise, domain, t, at)
        rhs = u + forcing
        u_new, k = step_implicit(domain, u, times[m + 1], dt, flux, forcing, tol, max_iter, step=m)
        iters += k
        if not np.all(np.isfinite(u_new)):
            raise NonfiniteState("state overflowed", m)
        g = gradient(domain, u_new)
        d_m = dt * domain.weight * float(np.sum(flux.eval(times[m + 1], domain.centers, g) * g))
        ident[m] = l2_inner(domain, u_new - rhs, u_new) + d_m
        diss[m + 1] = diss[m] + d_m
        hs[m + 1] = hs[m] + dt * hs_m
        stoch[m + 1] = stoch[m] + l2_inner(domain, u, forcing)
        u = u_new
        norm_sq[m + 1] = l2_norm_sq(domain, u)
        if traj is not None:
            traj[m + 1] = u
    return PathResult(times, norm_sq, diss, hs, stoch, u, np.array(u0, dtype=float), ident, traj,
                      draw, iters, path_index)


def solve_path(config: SolverConfig, path_index: int = 0, draw: WienerDraw | None = None) -> PathResult:
    """One Euler-Maruyama path of the regularised problem."""
    noise = config.noise_or_zero()
    if draw is None and config.noise is not None:
        draw = config.draw(path_index)
    return integrate(config.domain, config.effective_flux(), noise, config.u0, 0.0, config.dt,
                     draw, config.steps, tol=config.newton_tol, max_iter=config.newton_max,
                     keep_trajectory=config.keep_trajectory, path_index=path_index)


def thread_count() -> int:
    env = os.environ.get("MUSLX_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def run_paths(fn, indices, threads: int | None = None) -> list:
    """Map ``fn`` over path indices; results come back in index order."""
    indices = list(indices)
    threads = thread_count() if threads is None else threads
    if threads <= 1 or len(indices) <= 1:
        return [fn(i) for i in indices]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, indices))


def solve_ensemble(config: SolverConfig, paths: int | None = None,
                   threads: int | None = None) -> list[PathResult]:
    n = config.paths if paths is None else paths
    return run_paths(lambda i: solve_path(config, i), range(n), threads)


# -- multiplicative noise by Picard iteration -------------------------------------------


def weighted_sup_distance(domain: Domain, a: Array, b: Array, times: Array, alpha: float) -> float:
    diff = (a - b).reshape(len(times), -1)
    norms = np.sqrt(domain.weight * np.sum(diff * diff, axis=1))
    return float(np.max(np.exp(-alpha * times) * norms))


def solve_multiplicative(config: SolverConfig, path_index: int = 0, alpha: float = 10.0,
                         tol: float = 1e-8, max_iters: int = 50) -> PathResult:
    """Picard iteration ``S -> u_S`` over whole paths with one shared draw.

    Stops at the first ``k`` with ``sup_m exp(-alpha t_m) ||S_k - S_{k-1}|| <= tol``
    and reports ``k - 1`` map applications. The defects are kept on the
    result in ``picard_defects``.
    """
    noise = config.noise_or_zero()
    draw = config.draw(path_index) if config.noise is not None else None
    flux = config.effective_flux()
    M = config.steps
    S = np.broadcast_to(np.asarray(config.u0, dtype=float), (M + 1,) + config.domain.shape)
    defects: list[float] = []
    for k in range(1, max_iters + 1):
        res = integrate(config.domain, flux, noise, config.u0, 0.0, config.dt, draw, M,
                        noise_state=S, tol=config.newton_tol, max_iter=config.newton_max,
                        keep_trajectory=True, path_index=path_index)
        defects.append(weighted_sup_distance(config.domain, res.trajectory, S, res.times, alpha))
        S = res.trajectory
        if defects[-1] <= tol:
            res.picard_defects = defects
            if not config.keep_trajectory:
                res.trajectory = S
            return res
    raise NoContraction(f"Picard defects {defects[-3:]} not below {tol:g} after {max_iters} iterations")


def picard_iterations(result: PathResult) -> int:
    return len(result.picard_defects) - 1


# -- approximation cascades ----------------------------------------------------------


@dataclass
class CascadeRow:
    dial: str
    value_from: float
    value_to: float
    lhs_mean: float | None
    lhs_stderr: float | None
    rhs: float | None = None

    @property
    def ratio(self) -> float | None:
        if self.rhs is None or self.rhs == 0 or self.lhs_mean is None:
            return None
        return self.lhs_mean / self.rhs


def _sup_diff_sq(domain, a: Array, b: Array) -> float:
    diff = (a - b).reshape(a.shape[0], -1)
    return float(np.max(domain.weight * np.sum(diff * diff, axis=1)))


def _mean_stderr(x: Array) -> tuple[float, float]:
    x = np.asarray(x, dtype=float)
    if x.size < 2:
        return float(x.mean()), 0.0
    return float(x.mean()), float(x.std(ddof=1) / math.sqrt(x.size))


def epsilon_cascade(config: SolverConfig, eps_list, paths: int | None = None,
                    threads: int | None = None) -> list[CascadeRow]:
    """``E sup_m ||u^{eps_i} - u^{eps_{i+1}}||^2`` with shared draws."""
    eps_list = [float(e) for e in eps_list]
    if not eps_list:
        raise ValueError("empty eps list")
    if any(b > a for a, b in zip(eps_list, eps_list[1:])):
        raise ValueError("eps list must be descending")
    if len(eps_list) == 1:
        return [CascadeRow("eps", eps_list[0], eps_list[0], None, None)]
    n = config.paths if paths is None else paths

    def one(i):
        trajs = []
        for e in eps_list:
            cfg = replace(config, eps=e, keep_trajectory=True)
            trajs.append(solve_path(cfg, i).trajectory)
        return [_sup_diff_sq(config.domain, a, b) for a, b in zip(trajs, trajs[1:])]

    per_path = np.array(run_paths(one, range(n), threads)).reshape(n, len(eps_list) - 1)
    rows = []
    for k, (a, b) in enumerate(zip(eps_list, eps_list[1:])):
        mean, se = _mean_stderr(per_path[:, k])
        rows.append(CascadeRow("eps", a, b, mean, se))
    return rows


def truncate_noise(h: NoiseModel, N: int) -> NoiseModel:
    """Projection of ``h`` onto the first ``N`` modes."""
    if N > h.modes:
        raise ValueError(f"cannot keep {N} of {h.modes} modes")
    return NoiseModel(lambda t, x, lam: h.func(t, x, lam)[:N], N, h.additive, h.C1, h.C2, h.C3,
                      label=f"{h.label}[:{N}]", time_dependent=h.time_dependent)


def _band_noise(h: NoiseModel, lo: int, hi: int) -> NoiseModel:
    return NoiseModel(lambda t, x, lam: h.func(t, x, lam)[lo:hi], hi - lo, h.additive,
                      label=f"{h.label}[{lo}:{hi}]", time_dependent=h.time_dependent)


def noise_mode_cascade(config: SolverConfig, N_list, paths: int | None = None,
                       threads: int | None = None) -> list[CascadeRow]:
    """``E sup_m ||u^{N1} - u^{N2}||^2`` against ``int ||h^{N1} - h^{N2}||_HS^2``.

    All truncation levels share the draw of the largest one.
    """
    N_list = [int(n) for n in N_list]
    if not N_list:
        raise ValueError("empty mode list")
    if any(b < a for a, b in zip(N_list, N_list[1:])):
        raise ValueError("mode list must be ascending")
    if config.noise is None:
        raise ValueError("mode cascade needs a noise model")
    if len(N_list) == 1:
        return [CascadeRow("modes", N_list[0], N_list[0], None, None)]
    Nmax = N_list[-1]
    base = truncate_noise(config.noise, Nmax)
    n = config.paths if paths is None else paths
    flux = config.effective_flux()
    dom = config.domain

    def one(i):
        full = sample_increments(config.seed, i, config.steps, Nmax, config.dt)
        trajs = []
        for N in N_list:
            res = integrate(dom, flux, truncate_noise(base, N), config.u0, 0.0, config.dt,
                            full.truncate_modes(N), config.steps, tol=config.newton_tol,
                            max_iter=config.newton_max, keep_trajectory=True, path_index=i)
            trajs.append(res.trajectory)
        lhs = [_sup_diff_sq(dom, a, b) for a, b in zip(trajs, trajs[1:])]
        rhs = []
        for (N1, N2), traj in zip(zip(N_list, N_list[1:]), trajs[1:]):
            if N1 == N2:
                rhs.append(0.0)
                continue
            band = _band_noise(base, N1, N2)
            rhs.append(sum(config.dt * hs_norm_sq(band, dom, t, traj[m])
                           for m, t in enumerate(config.dt * np.arange(config.steps))))
        return lhs + rhs

    out = np.array(run_paths(one, range(n), threads)).reshape(n, 2 * (len(N_list) - 1))
    k = len(N_list) - 1
    rows = []
    for j, (a, b) in enumerate(zip(N_list, N_list[1:])):
        mean, se = _mean_stderr(out[:, j])
        rows.append(CascadeRow("modes", a, b, mean, se, float(out[:, k + j].mean())))
    return rows


def write_cascade_csv(rows: list[CascadeRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["dial", "from", "to", "lhs_mean", "lhs_stderr", "rhs", "ratio"])
        for r in rows:
            opt = ["" if v is None else repr(v) for v in (r.lhs_mean, r.lhs_stderr, r.rhs, r.ratio)]
            w.writerow([r.dial, repr(r.value_from), repr(r.value_to)] + opt)


def heat_mode_decay(basis: SineBasis, j: int, t: float, dt: float) -> float:
    """Backward-Euler amplitude factor of mode ``j`` after time ``t``."""
    steps = int(round(t / dt))
    return (1.0 + dt * basis.eigenvalue(j)) ** (-steps)
