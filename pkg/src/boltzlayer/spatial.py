"""Half-space spatial grid, boundary data, lifts, the inhomogeneous term and the
exact damped transport semigroup S0.

Fields are arrays of shape (nx, n2, n3, nv): normal coordinate x1, the two tangential
collocation axes (trigonometric interpolation on a torus of side `period`), velocity.
Slab symmetry is n2 = n3 = 1.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
import math
from typing import Callable

import numpy as np

from .velocity_grid import EquilibriumState, VelocityGrid


class SpatialError(ValueError):
    pass


# --------------------------------------------------------------------------- grid

@dataclass(frozen=True)
class SpatialGrid:
    x: np.ndarray = field(repr=False)
    ratio: float
    x_max: float
    n2: int = 1
    n3: int = 1
    period: float = 1.0

    @property
    def nx(self) -> int:
        return self.x.shape[0]

    @property
    def slab(self) -> bool:
        return self.n2 == 1 and self.n3 == 1

    @property
    def shape(self) -> tuple:
        return (self.nx, self.n2, self.n3)

    @property
    def x_weights(self) -> np.ndarray:
        """Trapezoid weights on the x1 nodes."""
        d = np.diff(self.x)
        w = np.zeros(self.nx)
        w[:-1] += 0.5 * d
        w[1:] += 0.5 * d
        return w

    @property
    def tangential_weight(self) -> float:
        if self.slab:
            return 1.0
        return (self.period / self.n2) * (self.period / self.n3)

    def tangential_coords(self) -> tuple[np.ndarray, np.ndarray]:
        """Collocation points in [-period/2, period/2), shape (n2, n3) each."""
        c2 = (np.arange(self.n2) - self.n2 // 2) * self.period / self.n2
        c3 = (np.arange(self.n3) - self.n3 // 2) * self.period / self.n3
        a, b = np.meshgrid(c2, c3, indexing="ij")
        return np.fft.ifftshift(a), np.fft.ifftshift(b)

    def wave_numbers(self) -> tuple[np.ndarray, np.ndarray]:
        k2 = np.fft.fftfreq(self.n2, d=1.0 / self.n2)
        k3 = np.fft.fftfreq(self.n3, d=1.0 / self.n3)
        a, b = np.meshgrid(k2, k3, indexing="ij")
        return a, b

    def modes(self) -> list[tuple[int, int]]:
        a, b = self.wave_numbers()
        return [(int(p), int(q)) for p, q in zip(a.ravel(), b.ravel())]

    def digest_dict(self) -> dict:
        return {
            "nx": self.nx,
            "ratio": self.ratio,
            "x_max": self.x_max,
            "first_spacing": float(self.x[1] - self.x[0]),
            "n2": self.n2,
            "n3": self.n3,
            "period": self.period,
        }


def build_spatial_grid(
    nx: int,
    x_max: float,
    ratio: float = 1.05,
    n2: int = 1,
    n3: int = 1,
    period: float = 1.0,
    sigma: float | None = None,
) -> SpatialGrid:
    """Geometrically stretched nodes 0 = x_0 < ... < x_{nx-1} = x_max."""
    if nx < 3:
        raise SpatialError("need at least 3 spatial nodes")
    if not x_max > 0 or not ratio >= 1.0:
        raise SpatialError("x_max must be positive and ratio >= 1")
    if sigma is not None and x_max < 10.0 / sigma * (1 - 1e-12):
        raise SpatialError(f"x_max={x_max} below 10/sigma={10.0 / sigma:.4g}")
    if n2 < 1 or n3 < 1 or n2 % 2 == 0 or n3 % 2 == 0:
        raise SpatialError("tangential collocation counts must be odd (symmetric mode sets)")
    if n2 * n3 > 5:
        raise SpatialError("at most 5 tangential wave vectors")
    k = np.arange(nx)
    if ratio == 1.0:
        x = x_max * k / (nx - 1)
    else:
        x = x_max * (ratio**k - 1.0) / (ratio ** (nx - 1) - 1.0)
    x[0] = 0.0
    x[-1] = x_max
    return SpatialGrid(x=x, ratio=float(ratio), x_max=float(x_max), n2=n2, n3=n3, period=float(period))


def default_sigma(nu: np.ndarray, vgrid: VelocityGrid) -> float:
    return 0.1 * float(np.min(nu)) / max(1.0, vgrid.cutoff)


def check_sigma(sigma: float, nu: np.ndarray, vgrid: VelocityGrid) -> None:
    if not sigma > 0:
        raise SpatialError("sigma must be positive")
    damp = nu - sigma * vgrid.nodes[:, 0]
    if np.any(damp <= 0):
        raise SpatialError(f"nu - sigma*xi1 not positive on the grid (min {damp.min():.3g})")


# --------------------------------------------------------------------------- fields

@dataclass
class DistributionField:
    values: np.ndarray
    rep: str = "weighted"  # 'weighted' (g) or 'plain' (f)
    time: float = 0.0

    def __post_init__(self):
        if self.rep not in ("weighted", "plain"):
            raise SpatialError(f"unknown representation {self.rep!r}")
        if self.values.ndim != 4:
            raise SpatialError("field values must have shape (nx, n2, n3, nv)")

    def copy(self) -> "DistributionField":
        return replace(self, values=self.values.copy())

    def far_field_ratio(self) -> float:
        peak = float(np.max(np.abs(self.values)))
        if peak == 0.0:
            return 0.0
        return float(np.max(np.abs(self.values[-1]))) / peak


def zeros_field(sgrid: SpatialGrid, vgrid: VelocityGrid, rep: str = "weighted", time: float = 0.0) -> DistributionField:
    return DistributionField(np.zeros(sgrid.shape + (vgrid.size,)), rep, time)


# --------------------------------------------------------------------------- mollifier

def mollifier(s) -> np.ndarray:
    """C^2 cubic spline: 1 on [0,1], 0 on [2, inf), knots at 1, 4/3, 5/3, 2."""
    s = np.asarray(s, dtype=float)
    out = np.zeros_like(s)
    out[s <= 1.0] = 1.0
    a = (s > 1.0) & (s <= 4.0 / 3.0)
    t = s[a] - 1.0
    out[a] = 1.0 - 4.5 * t**3
    b = (s > 4.0 / 3.0) & (s < 5.0 / 3.0)
    t = s[b] - 1.5
    out[b] = 0.5 - 2.25 * t + 9.0 * t**3
    c = (s >= 5.0 / 3.0) & (s < 2.0)
    out[c] = 4.5 * (2.0 - s[c]) ** 3
    return out


def mollifier_deriv(s) -> np.ndarray:
    s = np.asarray(s, dtype=float)
    out = np.zeros_like(s)
    a = (s > 1.0) & (s <= 4.0 / 3.0)
    out[a] = -13.5 * (s[a] - 1.0) ** 2
    b = (s > 4.0 / 3.0) & (s < 5.0 / 3.0)
    out[b] = -2.25 + 27.0 * (s[b] - 1.5) ** 2
    c = (s >= 5.0 / 3.0) & (s < 2.0)
    out[c] = -13.5 * (2.0 - s[c]) ** 2
    return out


# --------------------------------------------------------------------------- tangential ops

def tangential_shift(values: np.ndarray, sgrid: SpatialGrid, shift2, shift3) -> np.ndarray:
    """Evaluate the trigonometric interpolant at x' - shift along axes (1, 2).

    shift2/shift3 broadcast against (nx, 1, 1, nv) or (1, 1, nv)."""
    if sgrid.slab:
        return values
    k2, k3 = sgrid.wave_numbers()
    k2 = k2[..., None]
    k3 = k3[..., None]
    phase = np.exp(-2j * math.pi * (k2 * shift2 + k3 * shift3) / sgrid.period)
    spec = np.fft.fft2(values, axes=(-3, -2))
    return np.fft.ifft2(spec * phase, axes=(-3, -2)).real


def tangential_gradient(values: np.ndarray, sgrid: SpatialGrid) -> tuple[np.ndarray, np.ndarray]:
    """Spectral derivatives along x2, x3 of arrays with tangential axes (-3, -2) when a
    trailing velocity axis is present, or (-2, -1) for plain (n2, n3) arrays."""
    if sgrid.slab:
        z = np.zeros_like(values)
        return z, z
    plain = values.ndim == 2
    v = values[..., None] if plain else values
    k2, k3 = sgrid.wave_numbers()
    spec = np.fft.fft2(v, axes=(-3, -2))
    fac = 2j * math.pi / sgrid.period
    d2 = np.fft.ifft2(spec * (fac * k2)[..., None], axes=(-3, -2)).real
    d3 = np.fft.ifft2(spec * (fac * k3)[..., None], axes=(-3, -2)).real
    if plain:
        return d2[..., 0], d3[..., 0]
    return d2, d3


# --------------------------------------------------------------------------- boundary data

@dataclass
class BoundarySpec:
    """Inflow data split f_b = phi_R a0 + f_b^*.

    f_b^*(t, x', xi) = eps * m(t) * G(x') * psi(xi) with m(t) = 1 + amp sin(2 pi t / T*)
    (m = 1 when period is None). a0 and psi vanish for xi1 <= 0."""

    a0: np.ndarray = field(repr=False)
    psi: np.ndarray = field(repr=False)
    eps: float
    xprofile: np.ndarray = field(repr=False)  # G on the tangential collocation grid (n2, n3)
    period: float | None = None
    amp: float = 0.5
    R: float = 1.0
    delta_tilde: float = 0.0
    beta: float = 4.0

    @property
    def stationary(self) -> bool:
        return self.period is None

    def modulation(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        if self.period is None:
            return np.ones_like(t)
        return 1.0 + self.amp * np.sin(2.0 * math.pi * t / self.period)

    def modulation_rate(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        if self.period is None:
            return np.zeros_like(t)
        w = 2.0 * math.pi / self.period
        return self.amp * w * np.cos(w * t)

    def fb_star(self, t: float) -> np.ndarray:
        """Perturbation datum on the tangential grid, shape (n2, n3, nv)."""
        return self.eps * float(self.modulation(t)) * self.xprofile[..., None] * self.psi

    def check(self, vgrid: VelocityGrid) -> None:
        br = vgrid.bracket(self.beta)
        if np.any(np.abs(self.a0) > self.delta_tilde * (1.0 + 1e-12) / br):
            raise SpatialError("|a0| exceeds delta_tilde <xi>^-beta")
        inflow = vgrid.nodes[:, 0] > 0
        if np.any(self.a0[~inflow] != 0) or np.any(self.psi[~inflow] != 0):
            raise SpatialError("boundary data must vanish for xi1 <= 0")
        if self.period is not None:
            for t in (0.0, 0.37 * self.period, 0.81 * self.period):
                if np.max(np.abs(self.fb_star(t + self.period) - self.fb_star(t))) > 1e-12 * max(
                    np.max(np.abs(self.fb_star(t))), 1e-300
                ):
                    raise SpatialError("f_b^* is not periodic")


def velocity_profile(state: EquilibriumState, vgrid: VelocityGrid, beta: float) -> np.ndarray:
    """<xi>^-beta exp(-|xi - u|^2 / 4T) restricted to xi1 > 0."""
    xi = vgrid.nodes
    prof = vgrid.bracket(-beta) * np.exp(-np.sum((xi - state.u) ** 2, axis=1) / (4.0 * state.T_inf))
    return np.where(xi[:, 0] > 0, prof, 0.0)


def phi_R(sgrid: SpatialGrid, R: float) -> np.ndarray:
    """phi(|x'|/R) on the tangential collocation grid; identically 1 for the slab."""
    if sgrid.slab:
        return np.ones((1, 1))
    a, b = sgrid.tangential_coords()
    return mollifier(np.sqrt(a**2 + b**2) / R)


def gaussian_profile(sgrid: SpatialGrid, width: float, R: float) -> np.ndarray:
    if sgrid.slab:
        return np.ones((1, 1))
    a, b = sgrid.tangential_coords()
    r = np.sqrt(a**2 + b**2)
    return np.where(r <= R, np.exp(-(r**2) / (2.0 * width**2)), 0.0)


def make_boundary_spec(
    state: EquilibriumState,
    vgrid: VelocityGrid,
    sgrid: SpatialGrid,
    delta_tilde: float,
    eps: float,
    beta: float = 4.0,
    period: float | None = None,
    R: float | None = None,
    width: float | None = None,
    amp: float = 0.5,
) -> BoundarySpec:
    prof = velocity_profile(state, vgrid, beta)
    if R is None:
        R = sgrid.period / 5.0 if not sgrid.slab else 1.0
    if width is None:
        width = R / 2.0
    return BoundarySpec(
        a0=delta_tilde * prof,
        psi=prof,
        eps=float(eps),
        xprofile=gaussian_profile(sgrid, width, R),
        period=period,
        amp=amp,
        R=float(R),
        delta_tilde=float(delta_tilde),
        beta=float(beta),
    )


def extend_boundary_fb(spec: BoundarySpec, sgrid: SpatialGrid, vgrid: VelocityGrid, t: float = 0.0) -> np.ndarray:
    """F_b(x, xi) = chi(xi1) f_b^s(x' - x1 xi'/xi1, xi), shape (nx, n2, n3, nv)."""
    xi = vgrid.nodes
    b = spec.fb_star(t)  # (n2, n3, nv), zero for xi1 <= 0
    inflow = xi[:, 0] > 0
    tau = np.zeros((sgrid.nx, vgrid.size))
    tau[:, inflow] = sgrid.x[:, None] / xi[inflow, 0][None, :]
    vals = np.broadcast_to(b, sgrid.shape + (vgrid.size,)).copy()
    if not sgrid.slab:
        tt = tau[:, None, None, :]
        vals = tangential_shift(vals, sgrid, xi[:, 1] * tt, xi[:, 2] * tt)
    vals[..., ~inflow] = 0.0
    return vals


@dataclass
class Lift:
    """U(t) = m(t) U0 with the precomputed transport term xi.grad U0."""

    kind: str
    U0: np.ndarray = field(repr=False)
    transport_U0: np.ndarray = field(repr=False)
    spec: BoundarySpec = field(repr=False)

    def at(self, t: float) -> np.ndarray:
        return float(self.spec.modulation(t)) * self.U0

    def modulation(self, t) -> float:
        return float(self.spec.modulation(t))

    def modulation_rate(self, t) -> float:
        return float(self.spec.modulation_rate(t))


def build_lift(spec: BoundarySpec, sgrid: SpatialGrid, vgrid: VelocityGrid, kind: str = "stationary") -> Lift:
    """U^s = phi(x1) F_b (time independent) or U* = phi(x1) f_b^*(t, x')."""
    phi = mollifier(sgrid.x)[:, None, None, None]
    dphi = mollifier_deriv(sgrid.x)[:, None, None, None]
    xi = vgrid.nodes
    if kind == "stationary":
        if not spec.stationary:
            raise SpatialError("stationary lift needs time-independent data")
        Fb = extend_boundary_fb(spec, sgrid, vgrid)
        U0 = phi * Fb
        # xi.grad F_b = 0, so only the normal cutoff contributes
        tr = Fb * xi[:, 0] * dphi
    elif kind == "periodic":
        base = spec.eps * spec.xprofile[..., None] * spec.psi  # (n2, n3, nv)
        base = np.broadcast_to(base, sgrid.shape + (vgrid.size,))
        U0 = phi * base
        d2, d3 = tangential_gradient(np.ascontiguousarray(base[0]), sgrid)
        tr = xi[:, 0] * dphi * base + phi * (xi[:, 1] * d2 + xi[:, 2] * d3)[None]
    else:
        raise SpatialError(f"unknown lift kind {kind!r}")
    return Lift(kind=kind, U0=np.ascontiguousarray(U0), transport_U0=np.ascontiguousarray(tr), spec=spec)


# --------------------------------------------------------------------------- H

class MissingProfileError(SpatialError):
    pass


@dataclass
class InhomogeneousTerm:
    """H(t) = H0 + m(t) H1 + m(t)^2 H2 + m'(t) H3 (unweighted)."""

    parts: tuple = field(repr=False)
    spec: BoundarySpec = field(repr=False)

    def at(self, t: float) -> np.ndarray:
        m = float(self.spec.modulation(t))
        dm = float(self.spec.modulation_rate(t))
        H0, H1, H2, H3 = self.parts
        return H0 + m * H1 + m * m * H2 + dm * H3


def assemble_h(
    spec: BoundarySpec,
    lift: Lift,
    tilde_f: np.ndarray | None,
    op,
    quad,
    sgrid: SpatialGrid,
    vgrid: VelocityGrid,
) -> InhomogeneousTerm:
    """H = Gamma(a) - phi_R Gamma(f~) - xi'.grad'phi_R f~ - d_t U - xi.grad U + L U,
    with a = phi_R f~ + U."""
    if tilde_f is None:
        raise MissingProfileError("1D profile f~ missing: run the slab solve first")
    tilde_f = np.asarray(tilde_f)
    if tilde_f.shape != (sgrid.nx, vgrid.size):
        raise SpatialError("f~ must have shape (nx, nv)")
    pr = phi_R(sgrid, spec.R)
    d2, d3 = tangential_gradient(pr, sgrid)
    xi = vgrid.nodes
    ft = tilde_f[:, None, None, :]
    pf = pr[None, :, :, None] * ft
    gam = lambda f, g: _gamma_field(quad, f, g)
    G_ff = _gamma_field(quad, tilde_f, tilde_f)[:, None, None, :]
    U0 = lift.U0
    H0 = gam(pf, pf) - pr[None, :, :, None] * G_ff
    H0 = H0 - (xi[:, 1] * d2[..., None] + xi[:, 2] * d3[..., None])[None] * ft
    H1 = 2.0 * gam(pf, U0) - lift.transport_U0 + op.apply(U0)
    H2 = gam(U0, U0)
    H3 = -U0
    return InhomogeneousTerm(parts=(H0, H1, H2, H3), spec=spec)


def _gamma_field(quad, f: np.ndarray, g: np.ndarray) -> np.ndarray:
    f = np.asarray(f)
    g = np.asarray(g)
    shape = np.broadcast_shapes(f.shape, g.shape)
    f = np.broadcast_to(f, shape).reshape(-1, shape[-1])
    g = np.broadcast_to(g, shape).reshape(-1, shape[-1])
    active = np.flatnonzero(np.any(f != 0, axis=1) & np.any(g != 0, axis=1))
    out = np.zeros(f.shape)
    if active.size:
        out[active] = quad.gamma(f[active].T, g[active].T).T
    return out.reshape(shape)


# --------------------------------------------------------------------------- S0

@dataclass
class _Shift:
    lo: np.ndarray
    w: np.ndarray
    valid: np.ndarray
    damp: np.ndarray  # (nv,)


class Transport:
    """Exact damped free transport with zero inflow and zero far-field data."""

    def __init__(self, sgrid: SpatialGrid, vgrid: VelocityGrid, nu: np.ndarray, sigma: float):
        self.sgrid = sgrid
        self.vgrid = vgrid
        self.nu = np.asarray(nu, dtype=float)
        self.sigma = float(sigma)
        self._cache: dict = {}

    @property
    def rate(self) -> np.ndarray:
        return self.nu - self.sigma * self.vgrid.nodes[:, 0]

    def _shift(self, t: float) -> _Shift:
        key = float(t)
        if key in self._cache:
            return self._cache[key]
        x = self.sgrid.x
        xi1 = self.vgrid.nodes[:, 0]
        src = x[:, None] - xi1[None, :] * t
        if t == 0.0:
            valid = np.ones_like(src, dtype=bool)
        else:
            valid = (src > 0.0) & (src <= x[-1])
        lo = np.clip(np.searchsorted(x, src, side="right") - 1, 0, len(x) - 2)
        w = (src - x[lo]) / (x[lo + 1] - x[lo])
        w = np.clip(w, 0.0, 1.0)
        sh = _Shift(lo=lo, w=w, valid=valid, damp=np.exp(-self.rate * t))
        if len(self._cache) < 16:
            self._cache[key] = sh
        return sh

    def apply(self, values: np.ndarray, t: float, inflow: np.ndarray | None = None) -> np.ndarray:
        """S0(t) on an (nx, n2, n3, nv) array; `inflow` (n2, n3, nv) supplies boundary
        data at x1 = 0 for characteristics that started on the wall."""
        if t < 0:
            raise SpatialError("negative time")
        if t == 0.0 and inflow is None:
            return values.copy()
        sh = self._shift(t)
        lo = sh.lo[:, None, None, :]
        w = sh.w[:, None, None, :]
        a = np.take_along_axis(values, np.broadcast_to(lo, values.shape), axis=0)
        b = np.take_along_axis(values, np.broadcast_to(lo + 1, values.shape), axis=0)
        out = (1.0 - w) * a + w * b
        out *= sh.valid[:, None, None, :]
        out *= sh.damp
        if not self.sgrid.slab:
            xi = self.vgrid.nodes
            out = tangential_shift(out, self.sgrid, xi[:, 1] * t, xi[:, 2] * t)
        if inflow is not None:
            out += self._from_wall(inflow, t)
        return out

    def _from_wall(self, inflow: np.ndarray, t: float) -> np.ndarray:
        x = self.sgrid.x
        xi = self.vgrid.nodes
        pos = xi[:, 0] > 0
        tau = np.zeros((x.size, xi.shape[0]))
        tau[:, pos] = x[:, None] / xi[pos, 0][None, :]
        hit = pos[None, :] & (x[:, None] - xi[:, 0][None, :] * t <= 0.0)
        if t == 0.0:
            hit[:] = False
        vals = np.broadcast_to(inflow, self.sgrid.shape + (xi.shape[0],)).copy()
        tt = tau[:, None, None, :]
        if not self.sgrid.slab:
            vals = tangential_shift(vals, self.sgrid, xi[:, 1] * tt, xi[:, 2] * tt)
        vals *= np.exp(-self.rate * tt)
        return vals * hit[:, None, None, :]


def apply_s0(h0: DistributionField, t: float, transport: Transport, inflow=None) -> DistributionField:
    return DistributionField(transport.apply(h0.values, t, inflow), h0.rep, h0.time + t)


# --------------------------------------------------------------------------- residual

def upwind_transport(values: np.ndarray, sgrid: SpatialGrid, vgrid: VelocityGrid) -> np.ndarray:
    """xi . grad g with first-order upwind differences in x1 and spectral x'.
    Rows without an upwind stencil are set to zero."""
    x = sgrid.x
    xi1 = vgrid.nodes[:, 0]
    dx = np.diff(x)[:, None, None, None]
    back = np.zeros_like(values)
    back[1:] = (values[1:] - values[:-1]) / dx
    fwd = np.zeros_like(values)
    fwd[:-1] = (values[1:] - values[:-1]) / dx
    out = np.where(xi1 > 0, xi1 * back, xi1 * fwd)
    if not sgrid.slab:
        d2, d3 = tangential_gradient(values, sgrid)
        out = out + vgrid.nodes[:, 1] * d2 + vgrid.nodes[:, 2] * d3
    return out


def norms_of(values: np.ndarray, sgrid: SpatialGrid, vgrid: VelocityGrid, beta: float) -> tuple[float, float]:
    w = sgrid.x_weights[:, None, None, None] * sgrid.tangential_weight * vgrid.weights
    l2 = math.sqrt(float(np.sum(w * values**2)))
    linf = float(np.max(np.abs(values) * vgrid.bracket(beta))) if values.size else 0.0
    return l2, linf


def transport_residual(
    g: np.ndarray,
    rhs: np.ndarray,
    op,
    sgrid: SpatialGrid,
    vgrid: VelocityGrid,
    sigma: float,
    beta: float,
    dgdt: np.ndarray | None = None,
) -> dict:
    """Residual of d_t g + xi.grad g - sigma xi1 g - L g - rhs on rows with an upwind
    stencil, plus the inflow trace g(0, xi1 > 0)."""
    xi1 = vgrid.nodes[:, 0]
    res = upwind_transport(g, sgrid, vgrid) - sigma * xi1 * g - op.apply(g) - rhs
    if dgdt is not None:
        res = res + dgdt
    mask = np.ones(g.shape, dtype=bool)
    mask[0, ..., xi1 > 0] = False
    mask[-1, ..., xi1 < 0] = False
    res = np.where(mask, res, 0.0)
    l2, linf = norms_of(res, sgrid, vgrid, beta)
    trace = float(np.max(np.abs(g[0][..., xi1 > 0]))) if np.any(xi1 > 0) else 0.0
    return {"L2": l2, "Linf_beta": linf, "inflow_trace": trace}
