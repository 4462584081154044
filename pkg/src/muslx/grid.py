"""Finite-difference grids with homogeneous Dirichlet boundary.

Grid functions are plain ``ndarray`` objects holding values at the interior
nodes; the boundary trace is zero by construction and never stored.
Gradients live on the ``n**d`` forward-difference cells and carry a leading
component axis of length ``d``.

The divergence is the negative adjoint of the gradient under the discrete
L2 inner products, so ``<div F, v> + <F, grad v> = 0`` holds to rounding.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property, lru_cache

import numpy as np
import scipy.sparse as sp


@dataclass(frozen=True)
class Domain:
    dim: int
    cells: int
    extent: tuple[float, float] = (0.0, 1.0)

    def __post_init__(self):
        if self.dim not in (1, 2):
            raise ValueError(f"dim must be 1 or 2, got {self.dim}")
        if self.cells < 4:
            raise ValueError(f"need at least 4 cells per axis, got {self.cells}")
        lo, hi = self.extent
        if not hi > lo:
            raise ValueError(f"empty extent {self.extent}")

    @property
    def length(self) -> float:
        return self.extent[1] - self.extent[0]

    @property
    def h(self) -> float:
        return self.length / self.cells

    @property
    def measure(self) -> float:
        return self.length**self.dim

    @property
    def shape(self) -> tuple[int, ...]:
        """Shape of a grid function (interior nodes)."""
        return (self.cells - 1,) * self.dim

    @property
    def grad_shape(self) -> tuple[int, ...]:
        return (self.dim,) + (self.cells,) * self.dim

    @property
    def weight(self) -> float:
        """Cell volume used by both node and cell inner products."""
        return self.h**self.dim

    @cached_property
    def nodes(self) -> tuple[np.ndarray, ...]:
        """Interior node coordinates, broadcast to ``shape``."""
        x = self.extent[0] + self.h * np.arange(1, self.cells)
        return tuple(np.meshgrid(*([x] * self.dim), indexing="ij"))

    @cached_property
    def centers(self) -> tuple[np.ndarray, ...]:
        """Coordinates attached to gradient cells (cell midpoints)."""
        x = self.extent[0] + self.h * (np.arange(self.cells) + 0.5)
        return tuple(np.meshgrid(*([x] * self.dim), indexing="ij"))

    def zeros(self) -> np.ndarray:
        return np.zeros(self.shape)

    def sample(self, func) -> np.ndarray:
        """Evaluate ``func(*coords)`` at the interior nodes."""
        return np.asarray(func(*self.nodes), dtype=float) * np.ones(self.shape)

    @cached_property
    def grad_matrix(self) -> sp.csr_matrix:
        """Sparse matrix of :func:`gradient` acting on flattened grid functions."""
        n = self.cells
        # 1-D forward difference from n-1 interior nodes to n cells
        d1 = sp.diags([np.ones(n - 1), -np.ones(n - 1)], [0, -1], shape=(n, n - 1)) / self.h
        if self.dim == 1:
            return d1.tocsr()
        # cells take the node at their lower-left corner in the transverse
        # direction; the extra row of cells sees the zero boundary
        pad = sp.eye(n, n - 1, k=-1)
        gx = sp.kron(d1, pad)
        gy = sp.kron(pad, d1)
        return sp.vstack([gx, gy]).tocsr()


def _check(domain: Domain, arr: np.ndarray, shape: tuple[int, ...], what: str):
    if arr.shape != shape:
        raise ValueError(f"{what} has shape {arr.shape}, expected {shape} for {domain}")


def gradient(domain: Domain, u: np.ndarray) -> np.ndarray:
    _check(domain, u, domain.shape, "grid function")
    h = domain.h
    if domain.dim == 1:
        g = np.empty((1, domain.cells))
        g[0, 0] = u[0]
        np.subtract(u[1:], u[:-1], out=g[0, 1:-1])
        g[0, -1] = -u[-1]
        return g / h
    pad = np.pad(u, 1)
    gx = np.diff(pad[:, :-1], axis=0) / h
    gy = np.diff(pad[:-1, :], axis=1) / h
    return np.stack([gx, gy])


def divergence(domain: Domain, F: np.ndarray) -> np.ndarray:
    _check(domain, F, domain.grad_shape, "gradient field")
    h = domain.h
    if domain.dim == 1:
        return np.diff(F[0]) / h
    fx, fy = F
    out = np.diff(fx, axis=0)[:, 1:] + np.diff(fy, axis=1)[1:, :]
    return out / h


def l2_inner(domain: Domain, u: np.ndarray, v: np.ndarray) -> float:
    if u.shape != v.shape:
        raise ValueError(f"shape mismatch {u.shape} vs {v.shape}")
    return float(domain.weight * np.vdot(u, v))


def l2_norm_sq(domain: Domain, u: np.ndarray) -> float:
    return l2_inner(domain, u, u)


def qt_integral(domain: Domain, values: np.ndarray, dt: float) -> float:
    """Midpoint-in-time, cell-weighted-in-space integral over Q_T.

    ``values`` has a leading time axis (one slice per time cell) followed by
    either a grid-function or a gradient-field shape.
    """
    if values.shape[1:] not in (domain.shape, domain.grad_shape):
        raise ValueError(f"field shape {values.shape[1:]} does not match {domain}")
    return float(dt * domain.weight * values.sum())


@dataclass(frozen=True)
class SineBasis:
    """Orthonormal Dirichlet sine modes, tensorised in 2-D.

    Modes are ordered by increasing Laplacian eigenvalue (ties broken
    lexicographically), so index 0 is the ground mode ``e_1``.
    """

    domain: Domain

    @cached_property
    def multi_indices(self) -> list[tuple[int, ...]]:
        n = self.domain.cells
        if self.domain.dim == 1:
            return [(j,) for j in range(1, n)]
        pairs = [(a, b) for a in range(1, n) for b in range(1, n)]
        return sorted(pairs, key=lambda ab: (ab[0] ** 2 + ab[1] ** 2, ab))

    @property
    def size(self) -> int:
        return len(self.multi_indices)

    def mode(self, j: int, coords=None) -> np.ndarray:
        """Mode ``e_j`` (1-based) at ``coords`` (default: interior nodes)."""
        if not 1 <= j <= self.size:
            raise IndexError(f"mode {j} outside 1..{self.size}")
        d = self.domain
        coords = d.nodes if coords is None else coords
        L = d.length
        out = 1.0
        for k, x in zip(self.multi_indices[j - 1], coords):
            out = out * np.sqrt(2.0 / L) * np.sin(k * np.pi * (np.asarray(x) - d.extent[0]) / L)
        return out

    def modes(self, N: int, coords=None) -> np.ndarray:
        if coords is None or coords is self.domain.nodes:
            return self._node_modes(N)
        return np.stack([self.mode(j, coords) for j in range(1, N + 1)])

    @lru_cache(maxsize=16)
    def _node_modes(self, N: int) -> np.ndarray:
        out = np.stack([self.mode(j) for j in range(1, N + 1)])
        out.setflags(write=False)
        return out

    def eigenvalue(self, j: int) -> float:
        """Eigenvalue of ``-div grad`` on mode ``e_j`` for the discrete operator."""
        h = self.domain.h
        ks = self.multi_indices[j - 1]
        L = self.domain.length
        return float(sum(4.0 / h**2 * np.sin(k * np.pi * h / (2 * L)) ** 2 for k in ks))

    def continuum_eigenvalue(self, j: int) -> float:
        L = self.domain.length
        return float(sum((k * np.pi / L) ** 2 for k in self.multi_indices[j - 1]))

    def gram(self, N: int) -> np.ndarray:
        E = self.modes(N).reshape(N, -1)
        return self.domain.weight * E @ E.T


def project_modes(basis: SineBasis, u: np.ndarray, N: int) -> np.ndarray:
    if N > basis.size:
        raise ValueError(f"N={N} exceeds basis size {basis.size}")
    E = basis.modes(N).reshape(N, -1)
    return basis.domain.weight * E @ u.reshape(-1)


def lift_modes(basis: SineBasis, coeffs) -> np.ndarray:
    coeffs = np.asarray(coeffs, dtype=float)
    E = basis.modes(len(coeffs))
    return np.tensordot(coeffs, E, axes=1)


def to_csv(domain: Domain, u: np.ndarray, path) -> None:
    """Write node coordinates and values, boundary excluded."""
    cols = [c.reshape(-1) for c in domain.nodes] + [u.reshape(-1)]
    header = ",".join(["x", "y"][: domain.dim] + ["value"])
    np.savetxt(path, np.column_stack(cols), delimiter=",", header=header, comments="")
