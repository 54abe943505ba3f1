"""Slab boundary layer, the Picard map on trajectories, time-global mild solutions,
periodic/stationary extraction by translation, and stability experiments."""

from __future__ import annotations

from dataclasses import dataclass, field
from collections import deque
import logging
import math

import numpy as np

from .norms import bracket, linf_beta, l2_norm
from .semigroup import DecayFit, FitError, LinearEvolver, decay_fit
from .spatial import (
    BoundarySpec,
    InhomogeneousTerm,
    Lift,
    SpatialGrid,
    assemble_h,
    build_lift,
    phi_R,
)
from .velocity_grid import VelocityGrid

log = logging.getLogger(__name__)


class SolverError(RuntimeError):
    pass


class ContractionError(SolverError):
    pass


# --------------------------------------------------------------------------- slab

@dataclass
class SlabProfile:
    values: np.ndarray = field(repr=False)  # (nx, nv)
    x: np.ndarray = field(repr=False)
    delta_tilde: float
    beta: float
    iterations: int
    history: list
    fit: DecayFit | None = None
    M0: float | None = None
    slowest_rate: float | None = None

    @property
    def gamma0(self) -> float | None:
        return None if self.fit is None else self.fit.rate

    def envelope(self, vgrid: VelocityGrid) -> np.ndarray:
        return np.max(np.abs(self.values) * vgrid.bracket(self.beta), axis=1)

    def bound_holds(self, vgrid: VelocityGrid) -> bool:
        if self.fit is None:
            return bool(np.all(self.values == 0))
        rhs = self.delta_tilde * self.M0 * np.exp(-self.gamma0 * self.x)[:, None] * vgrid.bracket(-self.beta)[None, :]
        return bool(np.all(np.abs(self.values) <= rhs * (1 + 1e-12)))


def _phi12(z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """phi1(z) = (e^z - 1)/z and phi2(z) = (e^z - 1 - z)/z^2 for z <= 0, stable near 0."""
    z = np.asarray(z, dtype=float)
    small = np.abs(z) < 1e-3
    zs = np.where(small, 1.0, z)
    em = np.expm1(zs)
    p1 = np.where(small, 1.0 + z / 2.0 + z * z / 6.0 + z**3 / 24.0, em / zs)
    p2 = np.where(small, 0.5 + z / 6.0 + z * z / 24.0 + z**3 / 120.0, (em - zs) / (zs * zs))
    return p1, p2


class SlabSystem:
    """Exact-in-x solver for xi1 f' = L f + s(x), f(0, xi1 > 0) = a, f -> 0.

    xi1^{-1} L = V diag(lam) V^{-1} splits into decaying modes (fixed by the inflow
    data) and growing/null modes (integrated in from the far end). Between nodes the
    source is linear, so each cell update is exact for the linear part."""

    def __init__(self, op, sgrid: SpatialGrid, vgrid: VelocityGrid, zero_tol: float = 1e-8):
        xi1 = vgrid.nodes[:, 0]
        if np.any(xi1 == 0):
            raise SolverError("velocity grid has xi1 = 0 nodes")
        lam, V = np.linalg.eig(op.L / xi1[:, None])
        if np.max(np.abs(lam.imag)) > 1e-8 * max(1.0, np.max(np.abs(lam.real))):
            raise SolverError("xi1^{-1} L has complex spectrum")
        lam = lam.real
        V = V.real
        order = np.argsort(lam)
        lam, V = lam[order], V[:, order]
        self.lam = lam
        self.V = V
        self.W = np.linalg.inv(V)
        self.xi1 = xi1
        self.pos = xi1 > 0
        self.dec = lam < -zero_tol
        n_dec = int(self.dec.sum())
        if n_dec != int(self.pos.sum()):
            raise SolverError(f"{n_dec} decaying modes for {int(self.pos.sum())} inflow nodes; inflow is not supersonic")
        self.n_zero = int(np.sum(np.abs(lam) <= zero_tol))
        self.cond = float(np.linalg.cond(V))
        self._B = V[np.ix_(self.pos, self.dec)]
        self.x = sgrid.x
        h = np.diff(sgrid.x)
        ld, lg = lam[self.dec], lam[~self.dec]
        zd = h[:, None] * ld[None, :]
        zg = -h[:, None] * lg[None, :]
        p1, p2 = _phi12(zd)
        self._ed, self._c1d = np.exp(zd), h[:, None] * p2
        self._c0d = h[:, None] * p1 - self._c1d
        p1, p2 = _phi12(zg)
        self._eg, self._c1g = np.exp(zg), h[:, None] * p2
        self._c0g = h[:, None] * p1 - self._c1g

    @property
    def slowest_rate(self) -> float:
        return float(-np.max(self.lam[self.dec]))

    def solve(self, rhs: np.ndarray, inflow: np.ndarray) -> np.ndarray:
        r = (rhs / self.xi1) @ self.W.T
        rd, rg = r[:, self.dec], r[:, ~self.dec]
        nx = rhs.shape[0]
        yg = np.zeros_like(rg)
        for i in range(nx - 2, -1, -1):
            yg[i] = self._eg[i] * yg[i + 1] - self._c1g[i] * rg[i] - self._c0g[i] * rg[i + 1]
        f0_other = self.V[:, ~self.dec] @ yg[0]
        yd = np.zeros_like(rd)
        yd[0] = np.linalg.solve(self._B, inflow[self.pos] - f0_other[self.pos])
        for i in range(nx - 1):
            yd[i + 1] = self._ed[i] * yd[i] + self._c0d[i] * rd[i] + self._c1d[i] * rd[i + 1]
        return yd @ self.V[:, self.dec].T + yg @ self.V[:, ~self.dec].T


def gamma_rows(quad, f: np.ndarray, g: np.ndarray | None = None, rel_tol: float = 0.0) -> np.ndarray:
    """Gamma on arrays with velocity last, skipping rows whose sup is at most rel_tol
    times the global sup (their contribution is below rel_tol^2 of the largest)."""
    shape = f.shape
    F = f.reshape(-1, shape[-1])
    G = F if g is None else g.reshape(-1, shape[-1])
    fm = np.max(np.abs(F), axis=1)
    act = fm > rel_tol * fm.max() if fm.size else fm > 0
    act &= fm > 0
    if g is not None:
        gm = np.max(np.abs(G), axis=1)
        act &= (gm > rel_tol * gm.max()) & (gm > 0)
    out = np.zeros_like(F)
    rows = np.flatnonzero(act)
    if rows.size:
        Ft = np.ascontiguousarray(F[rows].T)
        Gt = Ft if g is None else np.ascontiguousarray(G[rows].T)
        out[rows] = quad.gamma(Ft, Gt).T
    return out.reshape(shape)


def solve_slab_stationary(
    a0: np.ndarray,
    op,
    quad,
    sgrid: SpatialGrid,
    vgrid: VelocityGrid,
    beta: float = 4.0,
    delta_tilde: float | None = None,
    tol: float = 1e-13,
    max_iter: int = 60,
    theta: float = 1.0,
    system: SlabSystem | None = None,
) -> SlabProfile:
    """Damped Picard iteration for xi1 f' = L f + Gamma(f), f(0, xi1 > 0) = a0."""
    op.state.require_supersonic_inflow()
    a0 = np.asarray(a0, dtype=float)
    if delta_tilde is None:
        delta_tilde = float(np.max(np.abs(a0) * vgrid.bracket(beta)))
    if np.all(a0 == 0):
        return SlabProfile(np.zeros((sgrid.nx, vgrid.size)), sgrid.x.copy(), 0.0, beta, 0, [])
    sys_ = system or SlabSystem(op, sgrid, vgrid)
    f = sys_.solve(np.zeros((sgrid.nx, vgrid.size)), a0)
    hist = []
    prev_diff = None
    for it in range(1, max_iter + 1):
        new = sys_.solve(gamma_rows(quad, f), a0)
        diff = float(np.max(np.abs(new - f)))
        scale = max(float(np.max(np.abs(new))), 1e-300)
        if prev_diff is not None and diff > prev_diff and theta > 0.125:
            theta *= 0.5
        f = (1.0 - theta) * f + theta * new
        hist.append(diff / scale)
        prev_diff = diff
        if diff <= tol * scale:
            break
    else:
        raise SolverError(f"slab Picard did not converge in {max_iter} iterations; history {hist[-5:]}")
    prof = SlabProfile(f, sgrid.x.copy(), float(delta_tilde), beta, it, hist)
    prof.slowest_rate = sys_.slowest_rate
    fit_profile(prof, vgrid)
    return prof


def fit_profile(prof: SlabProfile, vgrid: VelocityGrid, tail: float = 1e-3, floor: float = 1e-250) -> SlabProfile:
    """Fit sup_xi <xi>^beta |f~| ~ A e^{-gamma0 x1} on the tail (envelope below `tail`
    times its peak), then take M0 as the smallest constant making the bound hold at
    every node."""
    env = prof.envelope(vgrid)
    x = prof.x
    sel = (env <= tail * env.max()) & (env >= floor)
    sel[: int(np.argmax(env)) + 1] = False
    fit = decay_fit(x[sel], env[sel])
    prof.fit = fit
    br = vgrid.bracket(prof.beta)
    ratio = np.abs(prof.values) * br[None, :] * np.exp(fit.rate * x)[:, None]
    prof.M0 = float(np.max(ratio)) / prof.delta_tilde * (1 + 1e-12)
    return prof


# --------------------------------------------------------------------------- problem

@dataclass
class Problem:
    """Everything the Picard map needs: evolver, lift, inhomogeneous term and the
    linear coupling 2 Gamma(phi_R f~ + U, .)."""

    ev: LinearEvolver
    quad: object
    spec: BoundarySpec
    lift: Lift
    H: InhomogeneousTerm
    tilde_f: np.ndarray = field(repr=False)
    beta: float = 4.0
    delta: float = 0.0
    gamma_rel_tol: float = 1e-5
    gamma_dtype: str = "float64"
    nonlinear: bool = True
    B_rows: np.ndarray = field(default=None, repr=False)
    B_f: np.ndarray = field(default=None, repr=False)
    B_U: np.ndarray = field(default=None, repr=False)
    U_rows: np.ndarray = field(default=None, repr=False)
    wH: tuple = field(default=None, repr=False)
    _t32: np.ndarray = field(default=None, repr=False)

    @property
    def sgrid(self) -> SpatialGrid:
        return self.ev.sgrid

    @property
    def vgrid(self) -> VelocityGrid:
        return self.ev.vgrid

    @property
    def dt(self) -> float:
        return self.ev.dt

    @property
    def periodic(self) -> bool:
        return not self.spec.stationary

    @property
    def inv_weight(self) -> np.ndarray:
        return np.exp(-self.ev.sigma * self.sgrid.x)[:, None, None, None]

    def source(self, g: np.ndarray, t: float) -> np.ndarray:
        """e^{-sigma x} Gamma(g) + 2 Gamma(phi_R f~ + U(t), g) + e^{sigma x} H(t)."""
        out = self.linear_source(g, t)
        if self.nonlinear:
            out += self.self_gamma(g) * self.inv_weight
        return out + self.forcing(t)

    def self_gamma(self, g: np.ndarray) -> np.ndarray:
        """Gamma(g, g) on rows above gamma_rel_tol; single precision tensor when
        configured (the term is quadratic in small data)."""
        if self.gamma_dtype == "float64":
            return gamma_rows(self.quad, g, rel_tol=self.gamma_rel_tol)
        if self._t32 is None:
            T = self.quad.gamma_tensor()
            T = np.where(np.abs(T) < 1e-20 * np.max(np.abs(T)), 0.0, T)
            self._t32 = np.ascontiguousarray(T.reshape(-1, T.shape[-1]), dtype=np.float32)
        nv = g.shape[-1]
        G = g.reshape(-1, nv)
        gm = np.max(np.abs(G), axis=1)
        out = np.zeros_like(G)
        if gm.size == 0 or gm.max() == 0:
            return out.reshape(g.shape)
        s = float(gm.max())
        rows = np.flatnonzero(gm > self.gamma_rel_tol * s)
        # normalize and flush tiny entries so single precision never goes subnormal
        Gs = G[rows] / s
        Gs[np.abs(Gs) < 1e-18] = 0.0
        Gt = np.ascontiguousarray(Gs.T, dtype=np.float32)
        Y = (self._t32 @ Gt).reshape(nv, nv, -1)
        out[rows] = np.einsum("iam,am->mi", Y, Gt) * (s * s)
        return out.reshape(g.shape)

    def linear_source(self, g: np.ndarray, t: float) -> np.ndarray:
        G = g.reshape(-1, g.shape[-1])
        out = np.zeros_like(G)
        if self.B_rows.size:
            out[self.B_rows] = np.matmul(self.B_f, G[self.B_rows, :, None])[..., 0]
        if self.B_U is not None:
            m = float(self.spec.modulation(t))
            out[self.U_rows] += m * np.matmul(self.B_U, G[self.U_rows, :, None])[..., 0]
        return out.reshape(g.shape)

    def forcing(self, t: float) -> np.ndarray:
        m = float(self.spec.modulation(t))
        dm = float(self.spec.modulation_rate(t))
        H0, H1, H2, H3 = self.wH
        return H0 + m * H1 + m * m * H2 + dm * H3


def _coupling_matrices(quad, a: np.ndarray) -> np.ndarray:
    """Per spatial point matrices of g -> 2 Gamma(a, g), shape (P, nv, nv)."""
    T = quad.gamma_tensor()
    A = a.reshape(-1, a.shape[-1])
    n = T.shape[0]
    if A.shape[0] == 0:
        return np.zeros((0, n, n))
    Ta = np.ascontiguousarray(T.transpose(1, 0, 2)).reshape(n, n * n)
    return 2.0 * (A @ Ta).reshape(-1, n, n)


def build_problem(
    ev: LinearEvolver,
    quad,
    spec: BoundarySpec,
    profile: SlabProfile,
    beta: float = 4.0,
    kind: str | None = None,
    gamma_rel_tol: float = 1e-5,
    gamma_dtype: str = "float64",
    coupling_tol: float = 1e-13,
    nonlinear: bool = True,
) -> Problem:
    sgrid, vgrid = ev.sgrid, ev.vgrid
    if kind is None:
        kind = "stationary" if spec.stationary else "periodic"
    lift = build_lift(spec, sgrid, vgrid, kind)
    H = assemble_h(spec, lift, profile.values, ev.op, quad, sgrid, vgrid)
    w = np.exp(ev.sigma * sgrid.x)[:, None, None, None]
    pr = phi_R(sgrid, spec.R)
    a_f = pr[None, :, :, None] * profile.values[:, None, None, :]
    a_f = np.broadcast_to(a_f, sgrid.shape + (vgrid.size,))
    nv = vgrid.size

    def active(a):
        # rows where the coefficient is negligible carry no coupling
        amax = np.max(np.abs(a), axis=-1).ravel()
        if amax.size == 0 or amax.max() == 0:
            return np.zeros(0, dtype=int)
        return np.flatnonzero(amax > coupling_tol * amax.max())

    rows = active(a_f)
    urows = active(lift.U0)
    B_f = _coupling_matrices(quad, a_f.reshape(-1, nv)[rows])
    B_U = _coupling_matrices(quad, lift.U0.reshape(-1, nv)[urows]) if urows.size else None
    prob = Problem(
        ev=ev,
        quad=quad,
        spec=spec,
        lift=lift,
        H=H,
        tilde_f=profile.values,
        beta=beta,
        delta=boundary_delta(spec, sgrid, vgrid, beta),
        gamma_rel_tol=gamma_rel_tol,
        gamma_dtype=gamma_dtype,
        nonlinear=nonlinear,
        B_rows=rows,
        U_rows=urows,
        B_f=B_f,
        B_U=B_U,
        wH=tuple(w * h for h in H.parts),
    )
    return prob


def boundary_delta(spec: BoundarySpec, sgrid: SpatialGrid, vgrid: VelocityGrid, beta: float) -> float:
    """delta = delta~ + sup_t (||<xi> f_b^*||_{L^2} + ||f_b^*||_beta), plus the time
    derivative terms for periodic data."""
    tw = sgrid.tangential_weight
    br = vgrid.bracket()
    ts = [0.0] if spec.stationary else list(np.linspace(0.0, spec.period, 33))
    best = 0.0
    for t in ts:
        b = spec.fb_star(t)
        val = math.sqrt(float(np.sum(tw * vgrid.weights * (br * b) ** 2))) + linf_beta(b, vgrid, beta)
        if not spec.stationary:
            db = spec.eps * float(spec.modulation_rate(t)) * spec.xprofile[..., None] * spec.psi
            val += math.sqrt(float(np.sum(tw * vgrid.weights * db**2))) + linf_beta(db / br, vgrid, beta)
        best = max(best, val)
    return spec.delta_tilde + best


# --------------------------------------------------------------------------- Picard

@dataclass
class PicardState:
    iterations: int = 0
    diffs: list = field(default_factory=list)
    ratios: list = field(default_factory=list)
    residual: float = math.inf
    norm: float = 0.0
    bound_constant: float | None = None

    @property
    def contraction(self) -> float:
        return float(np.median(self.ratios[-3:])) if self.ratios else 0.0

    def as_dict(self) -> dict:
        return {
            "iterations": self.iterations,
            "diffs": self.diffs,
            "ratios": self.ratios,
            "contraction": self.contraction,
            "residual": self.residual,
            "norm": self.norm,
            "bound_constant": self.bound_constant,
        }


def picard_map(gbar: list, prob: Problem, g0: np.ndarray, ceiling: float = 1e3) -> list:
    """Phi[gbar] = S(t) g0 + S * {source(gbar)} on the evolver time grid."""
    ev = prob.ev
    h = 0.5 * ev.dt
    y = g0.copy()
    out = [y]
    prev = prob.source(gbar[0], 0.0)
    for k in range(1, len(gbar)):
        cur = prob.source(gbar[k], k * ev.dt)
        y = ev.step(y + h * prev) + h * np.where(ev.inflow_mask, cur, 0.0)
        if not np.all(np.isfinite(y)) or np.max(np.abs(y)) > ceiling:
            raise SolverError(f"Picard map blew up at t={k * ev.dt:.4g}; data outside the small-data regime")
        out.append(y)
        prev = cur
    return out


def traj_norm(traj: list, prob: Problem, kappa: float = 0.0) -> float:
    """|||g|||_{0,kappa,beta} over trajectory samples."""
    dt = prob.dt
    best = 0.0
    for k, v in enumerate(traj):
        best = max(best, math.exp(kappa * k * dt) * bracket(v, prob.sgrid, prob.vgrid, prob.beta))
    return best


def traj_diff_norm(a: list, b: list, prob: Problem, kappa: float = 0.0) -> float:
    dt = prob.dt
    best = 0.0
    for k, (u, v) in enumerate(zip(a, b)):
        best = max(best, math.exp(kappa * k * dt) * bracket(u - v, prob.sgrid, prob.vgrid, prob.beta))
    return best


def solve_time_global(
    prob: Problem,
    g0: np.ndarray,
    horizon: float,
    tol: float = 1e-12,
    max_iter: int = 30,
    theta: float = 1.0,
) -> tuple[list, PicardState]:
    """Fixed point of Phi on [0, horizon] by (damped) Picard iteration from gbar = 0.
    Stops when |||g_{k+1} - g_k||| <= tol |||g_{k+1}|||."""
    n = prob.ev.n_steps(horizon)
    g = [np.zeros_like(g0) for _ in range(n + 1)]
    st = PicardState()
    for it in range(1, max_iter + 1):
        new = picard_map(g, prob, g0)
        d = traj_diff_norm(new, g, prob)
        scale = traj_norm(new, prob)
        st.diffs.append(d)
        if len(st.diffs) >= 2 and st.diffs[-2] > 0:
            st.ratios.append(d / st.diffs[-2])
        g = new if theta == 1.0 else [(1 - theta) * a + theta * b for a, b in zip(g, new)]
        st.iterations = it
        if d <= tol * scale:
            break
        if len(st.ratios) >= 2 and st.ratios[-1] >= 1.0 and st.ratios[-2] >= 1.0:
            if theta > 0.25:
                theta *= 0.5
            else:
                raise ContractionError(
                    f"Picard contraction estimate {st.ratios[-1]:.3g} >= 1; reduce delta (data too large)"
                )
    else:
        raise ContractionError(f"Picard iteration did not reach tol={tol:g}; last differences {st.diffs[-3:]}")
    st.residual = traj_diff_norm(picard_map(g, prob, g0), g, prob)
    st.norm = traj_norm(g, prob)
    denom = bracket(g0, prob.sgrid, prob.vgrid, prob.beta) + prob.delta
    st.bound_constant = st.norm / denom if denom > 0 else None
    return g, st


def contraction_factor(
    prob: Problem,
    g0: np.ndarray,
    horizon: float,
    scale: float,
    base: list | None = None,
    iters: int = 6,
    seed: int = 42,
) -> float:
    """Lipschitz ratio |||Phi[b + p] - Phi[b]||| / |||p||| at the trajectory b (default
    Phi[0]), maximized over p of size `scale` by power iteration on differences."""
    rng = np.random.default_rng(seed)
    n = prob.ev.n_steps(horizon)
    if base is None:
        base = picard_map([np.zeros_like(g0)] * (n + 1), prob, g0)
    br = prob.vgrid.bracket(-prob.beta)
    pert = [rng.standard_normal(g0.shape) * br for _ in range(n + 1)]
    for p in pert:
        p[prob.ev.inflow_mask == False] = 0.0  # noqa: E712
    nrm = traj_norm(pert, prob)
    pert = [scale * p / nrm for p in pert]
    phi_base = picard_map(base, prob, g0)
    ratio = 0.0
    for _ in range(iters):
        phi_o = picard_map([b + p for b, p in zip(base, pert)], prob, g0)
        diff = [a - b for a, b in zip(phi_o, phi_base)]
        dn = traj_norm(diff, prob)
        ratio = dn / traj_norm(pert, prob)
        if dn == 0:
            return 0.0
        pert = [scale * d / dn for d in diff]
    return float(ratio)


def calibrate_eta(
    build,
    horizon: float,
    lo: float = 1e-4,
    hi: float = 1e2,
    steps: int = 6,
    iters: int = 3,
    threshold: float = 1.0,
) -> dict:
    """Smallness ceiling: bisection in log(delta) for the largest delta whose problem
    builds and whose measured contraction factor stays below `threshold`.

    `build(delta)` returns (problem, g0)."""
    hist = []

    def ok(d):
        try:
            prob, g0 = build(d)
            cf = contraction_factor(prob, g0, horizon, scale=1e-3 * d, iters=iters)
        except (SolverError, FitError, FloatingPointError) as exc:
            hist.append({"delta": d, "factor": None, "error": str(exc)})
            return False
        hist.append({"delta": d, "factor": cf})
        return cf < threshold

    if not ok(lo):
        raise ContractionError(f"no contraction even at delta={lo:g}")
    if ok(hi):
        return {"eta": hi, "history": hist, "bracketed": False}
    a, b = math.log(lo), math.log(hi)
    for _ in range(steps):
        mid = 0.5 * (a + b)
        if ok(math.exp(mid)):
            a = mid
        else:
            b = mid
    return {"eta": math.exp(a), "upper": math.exp(b), "history": hist, "bracketed": True}


# --------------------------------------------------------------------------- marching

def march(
    prob: Problem,
    g0: np.ndarray,
    n_steps: int,
    t0: float = 0.0,
    inner_tol: float = 1e-13,
    max_inner: int = 6,
    callback=None,
) -> np.ndarray:
    """Time-marching form of the trapezoid fixed point used by picard_map: each step
    solves y1 = E(y0 + dt/2 F(y0)) + dt/2 mask F(y1) by local iteration. The source at
    the accepted iterate is reused for the next step once the update is below
    inner_tol relative, so a step costs two source evaluations in the small-data regime."""
    ev = prob.ev
    h = 0.5 * ev.dt
    y = g0.copy()
    F = prob.source(y, t0)
    mask = ev.inflow_mask
    for k in range(1, n_steps + 1):
        t = t0 + k * ev.dt
        pred = ev.step(y + h * F)
        y1 = pred + h * np.where(mask, F, 0.0)
        d_prev = math.inf
        for _ in range(max_inner):
            F = prob.source(y1, t)
            y2 = pred + h * np.where(mask, F, 0.0)
            d = float(np.max(np.abs(y2 - y1)))
            y1 = y2
            # stop at tolerance or once the update stagnates at rounding level
            if d <= inner_tol * max(float(np.max(np.abs(y2))), 1e-300) or d > 0.25 * d_prev:
                break
            d_prev = d
        y = y1
        if not np.all(np.isfinite(y)):
            raise SolverError(f"non-finite state at t={t:.4g}")
        if callback is not None and callback(k, t, y):
            return y
    return y


def solve_marching(prob: Problem, g0: np.ndarray, horizon: float, t0: float = 0.0, **kw) -> list:
    traj = [g0.copy()]

    def keep(k, t, y):
        traj.append(y.copy())
        return False

    march(prob, g0, prob.ev.n_steps(horizon), t0=t0, callback=keep, **kw)
    return traj


# --------------------------------------------------------------------------- periodic

@dataclass
class PeriodicOrbit:
    """One period of samples g*(t_start + j dt), j = 0..m, with t_start a multiple of
    the period, plus the translated-sequence Cauchy history."""

    samples: list = field(repr=False)
    period: float
    dt: float
    cauchy: list = field(default_factory=list)
    scale: float = 0.0
    tol: float = 0.0
    converged: bool = False
    k_final: int = 0
    t_start: float = 0.0
    previous: list = field(default=None, repr=False)

    @property
    def steps(self) -> int:
        return len(self.samples) - 1

    def at(self, t: float) -> np.ndarray:
        """Periodic extension, t measured from the orbit phase origin."""
        k = int(round(t / self.dt)) % self.steps
        return self.samples[k]

    def endpoint_mismatch(self, sgrid, vgrid, beta) -> float:
        return bracket(self.samples[-1] - self.samples[0], sgrid, vgrid, beta)

    def cauchy_fit(self, skip: int = 0) -> DecayFit:
        c = np.asarray(self.cauchy[skip:])
        k = np.arange(skip, skip + c.size)
        return decay_fit(k * self.period, c, min_samples=3)

    def kappa_hat(self, skip: int = 0) -> float:
        """c_k ~ C e^{-kappa k T*/2}."""
        return 2.0 * self.cauchy_fit(skip).rate


def extract_periodic(
    prob: Problem,
    period: float,
    k_max: int = 40,
    tol: float = 1e-8,
    g0: np.ndarray | None = None,
    min_periods: int = 3,
) -> PeriodicOrbit:
    """Translated sequence g_k(t) = g(t + k T*) from one long march; stops when
    sup_{[0,T*]} [[g_{k+1} - g_k]]_beta <= tol * sup [[g_{k+1}]]_beta."""
    ev = prob.ev
    m = ev.n_steps(period)
    if m < 2:
        raise SolverError("period must span at least two time steps")
    if g0 is None:
        g0 = np.zeros(prob.sgrid.shape + (prob.vgrid.size,))
    sg, vg, beta = prob.sgrid, prob.vgrid, prob.beta
    buf = deque([g0.copy()], maxlen=2 * m + 1)
    cauchy = []
    info = {"scale": 0.0, "k": 0, "done": False}

    def cb(step, t, y):
        buf.append(y.copy())
        if step % m or step < 2 * m:
            return False
        old, new = list(buf)[: m + 1], list(buf)[m:]
        c = max(bracket(a - b, sg, vg, beta) for a, b in zip(new, old))
        scale = max(bracket(a, sg, vg, beta) for a in new)
        cauchy.append(c)
        info.update(scale=scale, k=step // m - 1)
        if c <= tol * max(scale, 1e-300) and len(cauchy) >= min_periods:
            info["done"] = True
            return True
        return False

    march(prob, g0, (k_max + 1) * m, callback=cb)
    if len(cauchy) >= 3:
        fit = decay_fit(np.arange(len(cauchy), dtype=float), np.maximum(cauchy, 1e-300), min_samples=3)
        if not info["done"] and fit.rate <= 0:
            raise SolverError(f"Cauchy history not decreasing: {cauchy[:3]} ... {cauchy[-3:]}")
    items = list(buf)
    k = info["k"]
    return PeriodicOrbit(
        samples=items[-(m + 1):],
        period=period,
        dt=ev.dt,
        cauchy=cauchy,
        scale=info["scale"],
        tol=tol,
        converged=info["done"],
        k_final=k,
        t_start=(k + 1) * period,
        previous=items[: m + 1] if len(items) == 2 * m + 1 else None,
    )


def orbit_residual(prob: Problem, orbit: PeriodicOrbit) -> float:
    """|||Phi[g*] - g*||| over one period with Phi started from g*(0)."""
    new = picard_map(orbit.samples, _ShiftedProblem(prob, orbit.t_start), orbit.samples[0])
    return traj_diff_norm(new, orbit.samples, prob)


class _ShiftedProblem:
    """Problem with the time origin moved to t0 (for data with period dividing t0 this
    only changes nothing but the bookkeeping)."""

    def __init__(self, prob: Problem, t0: float):
        self._p = prob
        self._t0 = t0
        self.ev = prob.ev

    def source(self, g, t):
        return self._p.source(g, t + self._t0)


def verify_stationarity(
    prob: Problem,
    period: float,
    levels: int = 3,
    k_max: int = 40,
    tol: float = 1e-8,
    g0: np.ndarray | None = None,
    orbit: PeriodicOrbit | None = None,
) -> dict:
    """Orbits with periods T*/2^l, l < levels, all cut from the same translated solve;
    pairwise distances at common phases and the time variation of the T* orbit."""
    if prob.periodic:
        raise SolverError("stationarity check needs time-independent data")
    sg, vg, beta = prob.sgrid, prob.vgrid, prob.beta
    m = prob.ev.n_steps(period)
    if m % 2 ** (levels - 1):
        raise SolverError(f"steps per period ({m}) not divisible by {2 ** (levels - 1)}")
    if orbit is None:
        orbit = extract_periodic(prob, period, k_max=k_max, tol=tol, g0=g0)
    full = (orbit.previous or [])[:-1] + orbit.samples
    subs = []
    cauchy = []
    for l in range(levels):
        p = m // 2**l
        subs.append(full[-(p + 1):])
        cauchy.append(max(bracket(full[-1 - j] - full[-1 - j - p], sg, vg, beta) for j in range(p + 1)))
    scale = max(bracket(s, sg, vg, beta) for s in orbit.samples)
    dist = {}
    for a in range(levels):
        for b in range(a + 1, levels):
            n = len(subs[b])
            dist[f"{a}-{b}"] = max(bracket(subs[a][j] - subs[b][j], sg, vg, beta) for j in range(n))
    variation = max(bracket(s - orbit.samples[0], sg, vg, beta) for s in orbit.samples)
    rel = {k: (v / scale if scale > 0 else 0.0) for k, v in dist.items()}
    return {
        "periods": [period / 2**l for l in range(levels)],
        "cauchy": cauchy,
        "distances": dist,
        "relative_distances": rel,
        "time_variation": variation,
        "relative_time_variation": variation / scale if scale > 0 else 0.0,
        "scale": scale,
        "converged": orbit.converged,
        "orbit": orbit,
    }


# --------------------------------------------------------------------------- stability

def perturbation_family(prob: Problem, count: int = 3, amplitude: float = 1e-3) -> list:
    """Smooth bumps in x1 with distinct centres and velocity profiles, zero inflow trace,
    each scaled to [[p]]_beta = amplitude."""
    x = prob.sgrid.x
    st = prob.ev.op.state
    xi = prob.vgrid.nodes
    gauss = np.exp(-np.sum((xi - st.u) ** 2, axis=1) / (4.0 * st.T_inf)) * prob.vgrid.bracket(-prob.beta)
    out = []
    for j in range(count):
        c = 1.0 + 1.5 * j
        bump = np.exp(-((x - c) ** 2) / 0.5)
        prof = gauss * (1.0 + 0.5 * np.cos((j + 1) * xi[:, 0]))
        v = np.broadcast_to(bump[:, None, None, None] * prof, prob.sgrid.shape + (prob.vgrid.size,)).copy()
        v[0, ..., xi[:, 0] > 0] = 0.0
        out.append(amplitude * v / bracket(v, prob.sgrid, prob.vgrid, prob.beta))
    return out


def stability_experiment(
    prob: Problem,
    target: PeriodicOrbit,
    perturbations: list,
    horizon: float,
    window: tuple | None = None,
    every: int = 1,
) -> dict:
    """Evolve g*(0) + p for each perturbation and the unperturbed g*(0) from the orbit
    phase origin; fit the decay of [[g(t) - g_ref(t)]]_beta and of pairwise
    differences between perturbed runs."""
    ev = prob.ev
    n = ev.n_steps(horizon)
    sg, vg, beta = prob.sgrid, prob.vgrid, prob.beta
    shifted = _ShiftedProblem(prob, target.t_start)
    base = target.samples[0]

    def run(p):
        out = [base + p]

        def cb(k, t, y):
            if k % every == 0:
                out.append(y.copy())
            return False

        march(shifted, base + p, n, callback=cb)
        return out

    ref = run(np.zeros_like(base))
    runs = [run(p) for p in perturbations]
    t = np.arange(len(ref)) * ev.dt * every
    series, fits = [], []
    for r in runs:
        rows = []
        for tt, a, b in zip(t, r, ref):
            d = a - b
            l2, lb = l2_norm(d, sg, vg), linf_beta(d, vg, beta)
            rows.append((float(tt), l2, lb, l2 + lb))
        series.append(rows)
        fits.append(decay_fit(t, [row[3] for row in rows], window))
    pair = []
    for a in range(len(runs)):
        for b in range(a + 1, len(runs)):
            y = [bracket(u - v, sg, vg, beta) for u, v in zip(runs[a], runs[b])]
            pair.append(decay_fit(t, y, window))
    return {
        "fits": [f.as_dict() for f in fits],
        "pair_fits": [f.as_dict() for f in pair],
        "initial": [s[0][3] for s in series],
        "final": [s[-1][3] for s in series],
        "series": series,
        "orbit_deviation": max(bracket(r - target.at(k * ev.dt * every), sg, vg, beta) for k, r in enumerate(ref)),
    }
