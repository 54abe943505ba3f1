"""Velocity-space discretization: Cartesian grid, equilibrium state, moments and the
collision-invariant projector."""

from __future__ import annotations

from dataclasses import dataclass, field
import hashlib
import math

import numpy as np


class GridError(ValueError):
    pass


class StateError(ValueError):
    pass


@dataclass(frozen=True)
class VelocityGrid:
    """Uniform tensor grid on [-R_v, R_v]^3 with midpoint weights."""

    nodes: np.ndarray = field(repr=False)
    weights: np.ndarray = field(repr=False)
    cutoff: float
    per_axis_count: int

    @property
    def size(self) -> int:
        return self.nodes.shape[0]

    @property
    def spacing(self) -> float:
        return 2.0 * self.cutoff / self.per_axis_count

    @property
    def axis(self) -> np.ndarray:
        h = self.spacing
        return -self.cutoff + h * (np.arange(self.per_axis_count) + 0.5)

    @property
    def speed(self) -> np.ndarray:
        return np.linalg.norm(self.nodes, axis=1)

    def bracket(self, power: float = 1.0) -> np.ndarray:
        """<xi>^power with <xi> = 1 + |xi|."""
        return (1.0 + self.speed) ** power

    def inner(self, f: np.ndarray, g: np.ndarray) -> float:
        return float(np.sum(self.weights * f * g))

    def l2(self, f: np.ndarray) -> float:
        return math.sqrt(max(self.inner(f, f), 0.0))

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.nodes).tobytes())
        h.update(np.ascontiguousarray(self.weights).tobytes())
        return h.hexdigest()[:16]


def build_grid(per_axis_count: int, cutoff: float) -> VelocityGrid:
    if per_axis_count < 4:
        raise GridError(
            f"per_axis_count={per_axis_count}: need at least 4 nodes per axis "
            "to resolve the five collision invariants"
        )
    if not cutoff > 0:
        raise GridError(f"cutoff must be positive, got {cutoff}")
    n = int(per_axis_count)
    h = 2.0 * cutoff / n
    axis = -cutoff + h * (np.arange(n) + 0.5)
    # index = (i1 * n + i2) * n + i3
    g1, g2, g3 = np.meshgrid(axis, axis, axis, indexing="ij")
    nodes = np.stack([g1.ravel(), g2.ravel(), g3.ravel()], axis=1)
    weights = np.full(nodes.shape[0], h**3)
    return VelocityGrid(nodes=nodes, weights=weights, cutoff=float(cutoff), per_axis_count=n)


def default_cutoff(T_inf: float, u_inf) -> float:
    return 6.0 * math.sqrt(T_inf) + float(np.linalg.norm(u_inf))


@dataclass(frozen=True)
class EquilibriumState:
    rho_inf: float
    u_inf: tuple
    T_inf: float
    sigma0: float = 1.0

    def __post_init__(self):
        u = tuple(float(c) for c in np.asarray(self.u_inf, dtype=float).ravel())
        if len(u) != 3:
            raise StateError("u_inf must have three components")
        object.__setattr__(self, "u_inf", u)
        if not self.rho_inf > 0:
            raise StateError("rho_inf must be positive")
        if not self.T_inf > 0:
            raise StateError("T_inf must be positive")
        if not self.sigma0 > 0:
            raise StateError("sigma0 must be positive")

    @property
    def u(self) -> np.ndarray:
        return np.array(self.u_inf)

    @property
    def mach(self) -> float:
        return mach_number(self)

    def require_supersonic_inflow(self) -> None:
        """Strict check: transverse velocity zero and Mach < -1 (equality rejected)."""
        if self.u_inf[1] != 0.0 or self.u_inf[2] != 0.0:
            raise StateError("supersonic-inflow state needs u_inf[1] = u_inf[2] = 0")
        m = mach_number(self)
        if not m < -1.0:
            raise StateError(f"Mach number {m:.6g} does not satisfy M < -1")

    def as_dict(self) -> dict:
        return {
            "rho_inf": self.rho_inf,
            "u_inf": list(self.u_inf),
            "T_inf": self.T_inf,
            "sigma0": self.sigma0,
        }


def mach_number(state: EquilibriumState) -> float:
    # rho_inf deliberately unused
    return state.u_inf[0] / math.sqrt(5.0 * state.T_inf / 3.0)


def maxwellian_at(xi: np.ndarray, rho: float, u, T: float) -> np.ndarray:
    xi = np.asarray(xi, dtype=float)
    d2 = np.sum((xi - np.asarray(u, dtype=float)) ** 2, axis=-1)
    return rho / (2.0 * math.pi * T) ** 1.5 * np.exp(-d2 / (2.0 * T))


def maxwellian(state: EquilibriumState, grid: VelocityGrid) -> np.ndarray:
    return maxwellian_at(grid.nodes, state.rho_inf, state.u, state.T_inf)


def weight_w0_at(xi: np.ndarray, state: EquilibriumState) -> np.ndarray:
    xi = np.asarray(xi, dtype=float)
    d2 = np.sum((xi - state.u) ** 2, axis=-1)
    T = state.T_inf
    return (2.0 * math.pi * T) ** -0.75 * np.exp(-d2 / (4.0 * T))


def weight_w0(state: EquilibriumState, grid: VelocityGrid) -> np.ndarray:
    """Square root of the unit-density Maxwellian at the far-field state."""
    return weight_w0_at(grid.nodes, state)


def invariant_polynomials(grid: VelocityGrid) -> np.ndarray:
    """Rows 1, xi1, xi2, xi3, |xi|^2 evaluated on the nodes, shape (5, n)."""
    xi = grid.nodes
    return np.vstack([np.ones(grid.size), xi[:, 0], xi[:, 1], xi[:, 2], np.sum(xi**2, axis=1)])


def moments(f: np.ndarray, grid: VelocityGrid) -> np.ndarray:
    """Mass, momentum (3) and energy moments of f; f may carry leading batch axes
    with velocity last."""
    return np.tensordot(np.asarray(f), (invariant_polynomials(grid) * grid.weights).T, axes=(-1, 0))


@dataclass(frozen=True)
class NullSpaceBasis:
    vectors: np.ndarray = field(repr=False)  # (5, n), orthonormal in the grid inner product
    weights: np.ndarray = field(repr=False)
    gram_condition: float

    def gram(self) -> np.ndarray:
        return (self.vectors * self.weights) @ self.vectors.T

    def coefficients(self, f: np.ndarray) -> np.ndarray:
        return np.tensordot(np.asarray(f), (self.vectors * self.weights).T, axes=(-1, 0))

    def matrix(self) -> np.ndarray:
        """Dense P acting on velocity vectors (columns)."""
        return self.vectors.T @ (self.vectors * self.weights)


def build_null_basis(state: EquilibriumState, grid: VelocityGrid, max_condition: float = 1e8) -> NullSpaceBasis:
    w = grid.weights
    gen = invariant_polynomials(grid) * weight_w0(state, grid)
    # scale generators so the condition number reflects geometry, not units
    norms = np.sqrt(np.sum(w * gen**2, axis=1))
    if np.any(norms == 0):
        raise GridError("null-space generator vanishes on the grid")
    scaled = gen / norms[:, None]
    gram = (scaled * w) @ scaled.T
    cond = float(np.linalg.cond(gram))
    if not np.isfinite(cond) or cond > max_condition:
        raise GridError(f"Gram matrix of collision invariants is degenerate (cond={cond:.3g}); grid too coarse")
    basis = np.array(scaled, copy=True)
    for k in range(5):
        # two passes of modified Gram-Schmidt
        for _ in range(2):
            for j in range(k):
                basis[k] -= np.sum(w * basis[j] * basis[k]) * basis[j]
        basis[k] /= math.sqrt(np.sum(w * basis[k] ** 2))
    return NullSpaceBasis(vectors=basis, weights=w.copy(), gram_condition=cond)


def project_p(f: np.ndarray, basis: NullSpaceBasis) -> np.ndarray:
    """Orthogonal projection onto the collision invariants along the last axis."""
    c = basis.coefficients(f)
    return np.tensordot(c, basis.vectors, axes=(-1, 0))
