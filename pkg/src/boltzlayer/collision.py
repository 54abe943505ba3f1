"""Hard-sphere collision quadrature, the bilinear operator Gamma and the linearized
operator L = -nu + K on a discrete velocity grid.

Post-collision velocities are generally off-grid. Values there are obtained by
trilinear interpolation of the perturbation f = F / W0, rescaled by
W0(xi') / I[W0](xi') so that Maxwellians at the far-field temperature and drift are
reproduced exactly; a collision whose post-collision pair leaves the node hull is
dropped together with its loss term. The output is then projected onto the
zero-moment subspace, which in f-variables is exactly (I - P).
"""

from __future__ import annotations

from dataclasses import dataclass, field
import logging
import math

import numpy as np
from scipy.special import erf

from .velocity_grid import (
    EquilibriumState,
    NullSpaceBasis,
    VelocityGrid,
    build_null_basis,
    weight_w0,
    weight_w0_at,
)

log = logging.getLogger(__name__)


class AssemblyError(RuntimeError):
    pass


# --------------------------------------------------------------------------- sphere

def _signed_perms(v):
    out = set()
    import itertools

    for p in itertools.permutations(v):
        for s in itertools.product((1, -1), repeat=3):
            out.add(tuple(a * b for a, b in zip(p, s)))
    return np.array(sorted(out), dtype=float)


def sphere_rule(degree: int = 5) -> tuple[np.ndarray, np.ndarray]:
    """Lebedev-type rule on S^2; weights sum to 4*pi.

    Degrees 3, 5 and 7 (6, 14 and 26 nodes) are tabulated, higher degrees come from
    scipy.
    """
    if degree == 3:
        pts = _signed_perms((1.0, 0.0, 0.0))
        w = np.full(len(pts), 1.0 / 6.0)
    elif degree == 5:
        a = _signed_perms((1.0, 0.0, 0.0))
        c = _signed_perms((1.0, 1.0, 1.0)) / math.sqrt(3.0)
        pts = np.vstack([a, c])
        w = np.concatenate([np.full(6, 1.0 / 15.0), np.full(8, 3.0 / 40.0)])
    elif degree == 7:
        a = _signed_perms((1.0, 0.0, 0.0))
        b = _signed_perms((1.0, 1.0, 0.0)) / math.sqrt(2.0)
        c = _signed_perms((1.0, 1.0, 1.0)) / math.sqrt(3.0)
        pts = np.vstack([a, b, c])
        w = np.concatenate([np.full(6, 1.0 / 21.0), np.full(12, 4.0 / 105.0), np.full(8, 9.0 / 280.0)])
    else:
        from scipy.integrate import lebedev_rule

        x, wts = lebedev_rule(degree)
        return np.ascontiguousarray(x.T), np.asarray(wts, dtype=float)
    return pts, 4.0 * math.pi * w


def fold_antipodal(omega: np.ndarray, weights: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Merge each direction with its antipode; post-collision velocities only depend on
    the line spanned by omega."""
    keep = []
    wts = []
    used = np.zeros(len(omega), dtype=bool)
    for k, w in enumerate(omega):
        if used[k]:
            continue
        d = np.linalg.norm(omega + w, axis=1)
        mate = np.flatnonzero((d < 1e-12) & ~used)
        used[k] = True
        if mate.size:
            used[mate[0]] = True
            keep.append(w)
            wts.append(weights[k] + weights[mate[0]])
        else:
            keep.append(w)
            wts.append(weights[k])
    return np.array(keep), np.array(wts)


# --------------------------------------------------------------------------- stencils

def trilinear_stencil(points: np.ndarray, grid: VelocityGrid) -> tuple[np.ndarray, np.ndarray]:
    """Corner indices (m, 8) and weights (m, 8) of trilinear interpolation on the node
    lattice. Points must lie inside the node hull."""
    n = grid.per_axis_count
    h = grid.spacing
    lo = grid.axis[0]
    u = (points - lo) / h
    base = np.clip(np.floor(u).astype(np.int64), 0, n - 2)
    t = np.clip(u - base, 0.0, 1.0)
    idx = np.empty((points.shape[0], 8), dtype=np.int64)
    wts = np.empty((points.shape[0], 8))
    k = 0
    for dx in (0, 1):
        wx = t[:, 0] if dx else 1.0 - t[:, 0]
        for dy in (0, 1):
            wy = t[:, 1] if dy else 1.0 - t[:, 1]
            for dz in (0, 1):
                wz = t[:, 2] if dz else 1.0 - t[:, 2]
                idx[:, k] = ((base[:, 0] + dx) * n + base[:, 1] + dy) * n + base[:, 2] + dz
                wts[:, k] = wx * wy * wz
                k += 1
    return idx, wts


@dataclass
class TripleBlock:
    """Collisions (i, j, omega) for a contiguous block of output rows i."""

    i: np.ndarray
    j: np.ndarray
    c: np.ndarray  # 1/2 sigma0 |zeta.omega| w_omega w_j W0_j
    idx_p: np.ndarray
    a_p: np.ndarray
    s_p: np.ndarray
    idx_s: np.ndarray
    a_s: np.ndarray
    s_s: np.ndarray
    w0_p: np.ndarray  # W0 at xi'
    w0_s: np.ndarray  # W0 at xi*'

    def __len__(self):
        return self.i.shape[0]


@dataclass
class CollisionQuadrature:
    state: EquilibriumState
    grid: VelocityGrid
    omega: np.ndarray  # folded directions
    omega_weights: np.ndarray
    full_weight_sum: float
    basis: NullSpaceBasis
    w0: np.ndarray = field(repr=False)
    block_rows: int = 64
    _cache: list | None = field(default=None, repr=False)
    _tensor: np.ndarray | None = field(default=None, repr=False)

    # Triple storage is cached when it fits comfortably in memory.
    max_cached_triples: int = 4_000_000

    @property
    def n(self) -> int:
        return self.grid.size

    def blocks(self):
        if self._cache is not None:
            yield from self._cache
            return
        cache = []
        total = 0
        for start in range(0, self.n, self.block_rows):
            blk = self._make_block(np.arange(start, min(start + self.block_rows, self.n)))
            total += len(blk)
            if cache is not None:
                cache.append(blk)
                if total > self.max_cached_triples:
                    cache = None
            yield blk
        if cache is not None:
            self._cache = cache

    def _make_block(self, rows: np.ndarray) -> TripleBlock:
        g = self.grid
        xi = g.nodes
        lo, hi = g.axis[0], g.axis[-1]
        tol = 1e-12 * g.spacing
        zeta = xi[rows, None, :] - xi[None, :, :]  # (b, n, 3)
        parts = []
        for om, wom in zip(self.omega, self.omega_weights):
            proj = zeta @ om
            xp = xi[rows, None, :] - proj[..., None] * om
            xs = xi[None, :, :] + proj[..., None] * om
            ok = np.abs(proj) > 1e-13
            ok &= np.all((xp >= lo - tol) & (xp <= hi + tol), axis=-1)
            ok &= np.all((xs >= lo - tol) & (xs <= hi + tol), axis=-1)
            bi, jj = np.nonzero(ok)
            if bi.size == 0:
                continue
            parts.append((rows[bi], jj, np.abs(proj[bi, jj]) * wom, xp[bi, jj], xs[bi, jj]))
        if not parts:
            e = np.empty(0)
            ei = np.empty(0, dtype=np.int64)
            e8 = np.empty((0, 8))
            ei8 = np.empty((0, 8), dtype=np.int64)
            return TripleBlock(ei, ei, e, ei8, e8, e, ei8, e8, e, e, e)
        i = np.concatenate([p[0] for p in parts])
        j = np.concatenate([p[1] for p in parts])
        qw = np.concatenate([p[2] for p in parts])
        xp = np.concatenate([p[3] for p in parts])
        xs = np.concatenate([p[4] for p in parts])
        order = np.argsort(i, kind="stable")
        i, j, qw, xp, xs = i[order], j[order], qw[order], xp[order], xs[order]
        w0 = self.w0
        c = 0.5 * self.state.sigma0 * qw * g.weights[j] * w0[j]
        idx_p, a_p = trilinear_stencil(xp, g)
        idx_s, a_s = trilinear_stencil(xs, g)
        w0_p = weight_w0_at(xp, self.state)
        w0_s = weight_w0_at(xs, self.state)
        s_p = w0_p / np.sum(a_p * w0[idx_p], axis=1)
        s_s = w0_s / np.sum(a_s * w0[idx_s], axis=1)
        return TripleBlock(i, j, c, idx_p, a_p, s_p, idx_s, a_s, s_s, w0_p, w0_s)

    def triple_count(self) -> int:
        return sum(len(b) for b in self.blocks())

    # ------------------------------------------------------------------ Gamma
    def gamma_raw(self, f: np.ndarray, g: np.ndarray) -> np.ndarray:
        """Uncorrected Gamma on velocity-first arrays (n,) or (n, m)."""
        f = np.asarray(f, dtype=float)
        g = np.asarray(g, dtype=float)
        vec = f.ndim == 1
        if vec:
            f = f[:, None]
            g = g[:, None]
        out = np.zeros((self.n, f.shape[1]))
        same = f is g or (f.shape == g.shape and np.shares_memory(f, g) and np.array_equal(f, g))
        for blk in self.blocks():
            if len(blk) == 0:
                continue
            fp = np.einsum("tk,tkm->tm", blk.a_p, f[blk.idx_p])
            fs = np.einsum("tk,tkm->tm", blk.a_s, f[blk.idx_s])
            if same:
                gain = 2.0 * fp * fs
                loss = 2.0 * f[blk.i] * f[blk.j]
            else:
                gp = np.einsum("tk,tkm->tm", blk.a_p, g[blk.idx_p])
                gs = np.einsum("tk,tkm->tm", blk.a_s, g[blk.idx_s])
                gain = fp * gs + fs * gp
                loss = f[blk.i] * g[blk.j] + f[blk.j] * g[blk.i]
            contrib = (blk.c * blk.s_p * blk.s_s)[:, None] * gain - blk.c[:, None] * loss
            starts = np.flatnonzero(np.r_[True, blk.i[1:] != blk.i[:-1]])
            out[blk.i[starts]] += np.add.reduceat(contrib, starts, axis=0)
        return out[:, 0] if vec else out

    def correct(self, y: np.ndarray) -> np.ndarray:
        """(I - P) along axis 0."""
        E = self.basis.vectors
        coef = (E * self.basis.weights) @ y
        return y - E.T @ coef

    def gamma_tensor(self) -> np.ndarray:
        """Dense corrected tensor T with Gamma(f, g)_i = sum_ab T[i, a, b] f_a g_b."""
        if self._tensor is not None:
            return self._tensor
        n = self.n
        flat = np.zeros(n * n * n)
        for blk in self.blocks():
            if len(blk) == 0:
                continue
            cg = blk.c * blk.s_p * blk.s_s
            base = blk.i * (n * n)
            # gain: a from xi', b from xi*', and the swapped pairing
            for k in range(8):
                wk = cg[:, None] * blk.a_p[:, k : k + 1] * blk.a_s
                ia = blk.idx_p[:, k : k + 1]
                flat += np.bincount((base[:, None] + ia * n + blk.idx_s).ravel(), wk.ravel(), minlength=n**3)
                flat += np.bincount((base[:, None] + blk.idx_s * n + ia).ravel(), wk.ravel(), minlength=n**3)
            flat -= np.bincount(base + blk.i * n + blk.j, blk.c, minlength=n**3)
            flat -= np.bincount(base + blk.j * n + blk.i, blk.c, minlength=n**3)
        T = flat.reshape(n, n * n)
        T = self.correct(T)
        self._tensor = T.reshape(n, n, n)
        return self._tensor

    def gamma(self, f: np.ndarray, g: np.ndarray, use_tensor: bool | None = None) -> np.ndarray:
        """Corrected Gamma on velocity-first arrays (n,) or (n, m)."""
        if use_tensor is None:
            use_tensor = self._tensor is not None
        if use_tensor:
            T = self.gamma_tensor()
            f = np.asarray(f, dtype=float)
            g = np.asarray(g, dtype=float)
            vec = f.ndim == 1
            if vec:
                f = f[:, None]
                g = g[:, None]
            n = self.n
            Y = (T.reshape(n * n, n) @ g).reshape(n, n, -1)
            out = np.einsum("iam,am->im", Y, f)
            return out[:, 0] if vec else out
        return self.correct(self.gamma_raw(f, g))


def build_quadrature(
    state: EquilibriumState,
    grid: VelocityGrid,
    sphere_degree: int = 5,
    basis: NullSpaceBasis | None = None,
) -> CollisionQuadrature:
    om, w = sphere_rule(sphere_degree)
    full = float(w.sum())
    om, w = fold_antipodal(om, w)
    if basis is None:
        basis = build_null_basis(state, grid)
    return CollisionQuadrature(
        state=state,
        grid=grid,
        omega=om,
        omega_weights=w,
        full_weight_sum=full,
        basis=basis,
        w0=weight_w0(state, grid),
    )


# --------------------------------------------------------------------------- Q and Gamma

def _velocity_first(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    return a if a.ndim == 1 else np.moveaxis(a, -1, 0).reshape(a.shape[-1], -1)


def _restore(out: np.ndarray, like: np.ndarray) -> np.ndarray:
    like = np.asarray(like)
    if like.ndim == 1:
        return out
    return np.moveaxis(out.reshape((like.shape[-1],) + like.shape[:-1]), 0, -1)


def collision_q(F: np.ndarray, G: np.ndarray, quad: CollisionQuadrature) -> np.ndarray:
    """Symmetrized discrete Q(F, G) with the conservation corrector applied.

    Arrays carry velocity on the last axis."""
    w0 = quad.w0
    f = _velocity_first(np.asarray(F) / w0)
    g = _velocity_first(np.asarray(G) / w0)
    out = quad.gamma(f, g)
    out = out * (w0[:, None] if out.ndim == 2 else w0)
    return _restore(out, F)


def gamma_bilinear(f: np.ndarray, g: np.ndarray, quad: CollisionQuadrature) -> np.ndarray:
    """Gamma(f, g) = W0^-1 Q(W0 f, W0 g); velocity on the last axis."""
    out = quad.gamma(_velocity_first(f), _velocity_first(g))
    return _restore(out, f)


# --------------------------------------------------------------------------- nu

def nu_exact_at(xi: np.ndarray, state: EquilibriumState) -> np.ndarray:
    """Hard-sphere collision frequency against the far-field Maxwellian.

    nu(xi) = sigma0 * 2*pi * int |xi - xi*| M(xi*) dxi*, with the sphere integral
    done exactly and the velocity integral in closed form."""
    xi = np.atleast_2d(np.asarray(xi, dtype=float))
    T = state.T_inf
    a = np.linalg.norm(xi - state.u, axis=1)
    s = a / math.sqrt(2.0 * T)
    with np.errstate(divide="ignore", invalid="ignore"):
        mean = math.sqrt(2.0 * T) * ((s + 0.5 / s) * erf(s) + np.exp(-(s**2)) / math.sqrt(math.pi))
    mean = np.where(s < 1e-8, math.sqrt(8.0 * T / math.pi) * (1.0 + s**2 / 3.0), mean)
    return 2.0 * math.pi * state.sigma0 * state.rho_inf * mean


def nu_collision_frequency(state: EquilibriumState, grid: VelocityGrid, quad: CollisionQuadrature | None = None) -> np.ndarray:
    return nu_exact_at(grid.nodes, state)


def nu_discrete(quad: CollisionQuadrature) -> np.ndarray:
    """Loss coefficient of the discrete linearization (truncated, sphere-rule based)."""
    rho = quad.state.rho_inf
    out = np.zeros(quad.n)
    for blk in quad.blocks():
        if len(blk):
            out += np.bincount(blk.i, 2.0 * rho * blk.c * quad.w0[blk.j], minlength=quad.n)
    return out


# --------------------------------------------------------------------------- L

@dataclass
class LinearizedOperator:
    state: EquilibriumState
    grid: VelocityGrid
    nu: np.ndarray = field(repr=False)
    K_matrix: np.ndarray = field(repr=False)
    basis: NullSpaceBasis = field(repr=False)
    asymmetry: float = 0.0
    nu_discrete: np.ndarray | None = field(default=None, repr=False)
    max_eigenvalue: float = 0.0

    @property
    def L(self) -> np.ndarray:
        return self.K_matrix - np.diag(self.nu)

    def apply(self, f: np.ndarray) -> np.ndarray:
        """L f with velocity on the last axis."""
        return f @ self.K_matrix.T - self.nu * f

    def apply_k(self, f: np.ndarray) -> np.ndarray:
        return f @ self.K_matrix.T

    def eigenvalues(self) -> np.ndarray:
        s = np.sqrt(self.grid.weights)
        Ls = (s[:, None] * self.L) / s[None, :]
        return np.linalg.eigvalsh(0.5 * (Ls + Ls.T))

    def nu0(self) -> float:
        """Largest c with c<xi> <= nu <= c^-1 <xi> on the grid."""
        br = self.grid.bracket()
        r = self.nu / br
        return float(min(r.min(), 1.0 / r.max()))

    def kernel(self) -> np.ndarray:
        """Kernel values K(xi_i, xi_j) = K_matrix[i, j] / w_j."""
        return self.K_matrix / self.grid.weights[None, :]


def linearization_matrix(quad: CollisionQuadrature) -> np.ndarray:
    """Matrix of f -> 2 rho Gamma_raw(W0, f) (uncorrected discrete linearization)."""
    n = quad.n
    rho = quad.state.rho_inf
    w0 = quad.w0
    flat = np.zeros(n * n)
    for blk in quad.blocks():
        if len(blk) == 0:
            continue
        row = (blk.i * n)[:, None]
        # s' * I'[W0] = W0(xi') exactly
        gp = (2.0 * rho * blk.c * blk.w0_p * blk.s_s)[:, None] * blk.a_s
        gs = (2.0 * rho * blk.c * blk.w0_s * blk.s_p)[:, None] * blk.a_p
        flat += np.bincount((row + blk.idx_s).ravel(), gp.ravel(), minlength=n * n)
        flat += np.bincount((row + blk.idx_p).ravel(), gs.ravel(), minlength=n * n)
        flat -= np.bincount(blk.i * n + blk.j, 2.0 * rho * blk.c * w0[blk.i], minlength=n * n)
        flat -= np.bincount(blk.i * n + blk.i, 2.0 * rho * blk.c * w0[blk.j], minlength=n * n)
    return flat.reshape(n, n)


def assemble_linearized(
    state: EquilibriumState,
    grid: VelocityGrid,
    quad: CollisionQuadrature,
    nu_mode: str = "exact",
    tol: float = 1e-8,
) -> LinearizedOperator:
    """Assemble L = -nu + K.

    The integral part comes from the discrete linearization of Q; the multiplication
    part nu is the exact hard-sphere frequency (nu_mode='exact') or the discrete loss
    coefficient ('discrete'). Null-space annihilation is enforced by (I-P) L (I-P) and
    the result is symmetrized in the grid inner product."""
    raw = linearization_matrix(quad)
    nu_d = nu_discrete(quad)
    K_raw = raw + np.diag(nu_d)
    if nu_mode == "exact":
        nu = nu_collision_frequency(state, grid)
    elif nu_mode == "discrete":
        nu = nu_d.copy()
    else:
        raise ValueError(f"unknown nu_mode {nu_mode!r}")
    L0 = K_raw - np.diag(nu)
    Pm = quad.basis.matrix()
    I = np.eye(grid.size)
    L1 = (I - Pm) @ L0 @ (I - Pm)
    s = np.sqrt(grid.weights)
    Ls = (s[:, None] * L1) / s[None, :]
    asym = float(np.linalg.norm(Ls - Ls.T) / max(np.linalg.norm(Ls), 1e-300))
    Ls = 0.5 * (Ls + Ls.T)
    L = Ls * s[None, :] / s[:, None]
    ev = np.linalg.eigvalsh(Ls)
    scale = float(np.max(np.abs(ev)))
    if ev[-1] > tol * scale:
        raise AssemblyError(f"assembled L has positive eigenvalue {ev[-1]:.3e} (scale {scale:.3e})")
    log.info("assembled L on %d nodes: asymmetry %.3e, max eig %.3e", grid.size, asym, ev[-1])
    return LinearizedOperator(
        state=state,
        grid=grid,
        nu=nu,
        K_matrix=L + np.diag(nu),
        basis=quad.basis,
        asymmetry=asym,
        nu_discrete=nu_d,
        max_eigenvalue=float(ev[-1]),
    )


# --------------------------------------------------------------------------- checks

def spectral_report(op: LinearizedOperator, zero_tol: float = 1e-8) -> dict:
    ev = op.eigenvalues()
    near_zero = np.abs(ev) <= zero_tol
    rest = ev[~near_zero]
    gap = float(-rest.max()) if rest.size else float("nan")
    return {
        "n_zero": int(near_zero.sum()),
        "gap": gap,
        "max_eigenvalue": float(ev.max()),
        "min_eigenvalue": float(ev.min()),
        "zero_tol": zero_tol,
    }


def complement_basis(basis: NullSpaceBasis) -> np.ndarray:
    """Columns spanning the orthogonal complement of N in sqrt(w)-scaled coordinates."""
    s = np.sqrt(basis.weights)
    E = basis.vectors * s  # orthonormal rows in Euclidean sense
    n = E.shape[1]
    q, _ = np.linalg.qr(np.hstack([E.T, np.eye(n)]), mode="reduced")
    return q[:, 5:n]


def coercivity_constant(op: LinearizedOperator) -> float:
    """Smallest nu1 with -(f, Lf) >= nu1 ||<xi>^1/2 (I-P) f||^2 (generalized eigenproblem)."""
    from scipy.linalg import eigh

    s = np.sqrt(op.grid.weights)
    Ls = (s[:, None] * op.L) / s[None, :]
    Ls = 0.5 * (Ls + Ls.T)
    Q = complement_basis(op.basis)
    A = Q.T @ (-Ls) @ Q
    B = Q.T @ (op.grid.bracket()[:, None] * Q)
    vals = eigh(0.5 * (A + A.T), 0.5 * (B + B.T), eigvals_only=True)
    return float(vals[0])


def coercivity_random(op: LinearizedOperator, trials: int = 200, seed: int = 42) -> float:
    rng = np.random.default_rng(seed)
    g = op.grid
    best = math.inf
    for _ in range(trials):
        f = rng.standard_normal(g.size)
        num = -g.inner(f, op.apply(f))
        r = f - (op.basis.vectors.T @ op.basis.coefficients(f))
        den = g.inner(g.bracket() * r, r)
        best = min(best, num / den)
    return best


def kernel_bound_check(op: LinearizedOperator, grid: VelocityGrid | None = None, coverage: float = 0.999) -> dict:
    """Fit |K(xi, xi')| <= k0 (r + 1/r) exp(-k1 r), r = |xi - xi'|, off the diagonal."""
    grid = grid or op.grid
    kern = np.abs(op.kernel())
    xi = grid.nodes
    r = np.linalg.norm(xi[:, None, :] - xi[None, :, :], axis=-1)
    off = ~np.eye(grid.size, dtype=bool)
    vals = kern[off]
    rr = r[off]
    nz = vals > 0
    y = np.log(vals[nz]) - np.log(rr[nz] + 1.0 / rr[nz])
    slope, _ = np.polyfit(rr[nz], y, 1)
    k1 = float(-slope)
    logk0 = float(np.quantile(y + k1 * rr[nz], coverage, method="higher"))
    k0 = math.exp(logk0) * (1.0 + 1e-12)
    bound = k0 * (rr + 1.0 / rr) * np.exp(-k1 * rr)
    violations = int(np.sum(vals > bound))
    # binned averages beyond r = 4
    far = rr > 4.0
    edges = np.linspace(4.0, rr.max() + 1e-9, 9)
    means = []
    for a, b in zip(edges[:-1], edges[1:]):
        sel = far & (rr >= a) & (rr < b)
        if sel.any():
            means.append(float(vals[sel].mean()))
    monotone = all(b <= a for a, b in zip(means[:-1], means[1:]))
    return {
        "k0": k0,
        "k1": k1,
        "violations": violations,
        "entries": int(vals.size),
        "coverage": 1.0 - violations / vals.size,
        "far_bin_means": means,
        "far_monotone": monotone,
    }


def a_matrix(state: EquilibriumState, grid: VelocityGrid, basis: NullSpaceBasis) -> tuple[np.ndarray, np.ndarray]:
    """Matrix of f -> P(xi1 f) restricted to N in the orthonormal basis, and its
    sorted eigenvalues."""
    E = basis.vectors
    A = (E * grid.weights) @ (E * grid.nodes[:, 0]).T
    A = 0.5 * (A + A.T)
    return A, np.sort(np.linalg.eigvalsh(A))


def p_xi1_bound(state: EquilibriumState, grid: VelocityGrid, basis: NullSpaceBasis, iters: int = 200, seed: int = 0) -> float:
    """Operator norm of f -> P(xi1 f) on L^2_xi by power iteration on T*T."""
    from .velocity_grid import project_p

    xi1 = grid.nodes[:, 0]
    rng = np.random.default_rng(seed)
    f = rng.standard_normal(grid.size)
    f /= grid.l2(f)
    lam = 0.0
    for _ in range(iters):
        y = xi1 * project_p(xi1 * f, basis)
        lam_new = grid.l2(y)
        if lam_new == 0.0:
            return 0.0
        f = y / lam_new
        if abs(lam_new - lam) <= 1e-14 * lam_new:
            lam = lam_new
            break
        lam = lam_new
    return math.sqrt(lam)


def gamma_constant(quad: CollisionQuadrature, op: LinearizedOperator, beta: float, trials: int = 50, seed: int = 42) -> float:
    """Fitted k3 in ||nu^-1 Gamma(f,g)||_{inf,beta} <= k3 ||f||_{inf,beta} ||g||_{inf,beta}."""
    rng = np.random.default_rng(seed)
    br = quad.grid.bracket(beta)
    F = rng.uniform(-1.0, 1.0, (quad.n, trials)) / br[:, None]
    G = rng.uniform(-1.0, 1.0, (quad.n, trials)) / br[:, None]
    out = quad.gamma(F, G)
    num = np.max(np.abs(out / op.nu[:, None]) * br[:, None], axis=0)
    den = np.max(np.abs(F) * br[:, None], axis=0) * np.max(np.abs(G) * br[:, None], axis=0)
    return float(np.max(num / den))
