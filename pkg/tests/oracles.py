"""Independent reference implementations used only by the tests."""

import math

import numpy as np


def _trilinear(axis, x):
    """Return [(flat index, weight)] for trilinear interpolation at point x."""
    n = len(axis)
    h = axis[1] - axis[0]
    cells = []
    for d in range(3):
        k = int(np.searchsorted(axis, x[d], side="right")) - 1
        k = min(max(k, 0), n - 2)
        t = (x[d] - axis[k]) / h
        cells.append([(k, 1.0 - t), (k + 1, t)])
    out = []
    for a, wa in cells[0]:
        for b, wb in cells[1]:
            for c, wc in cells[2]:
                out.append(((a * n + b) * n + c, wa * wb * wc))
    return out


def _w0(x, u, T):
    return (2 * math.pi * T) ** -0.75 * math.exp(-sum((x[k] - u[k]) ** 2 for k in range(3)) / (4 * T))


def brute_force_q(F, G, nodes, weights, axis, u, T, sigma0, sphere_pts, sphere_w):
    """Direct triple loop over (xi, xi*, omega) with the same interpolation and
    truncation conventions, followed by the zero-moment projection."""
    n = len(nodes)
    lo, hi = axis[0], axis[-1]
    eps = 1e-12 * (axis[1] - axis[0])
    W0 = np.array([_w0(x, u, T) for x in nodes])

    def value_at(H, x):
        st = _trilinear(axis, x)
        num = sum(w * H[a] / W0[a] for a, w in st)
        den = sum(w * W0[a] for a, w in st)
        return _w0(x, u, T) ** 2 * num / den

    out = np.zeros(n)
    for i in range(n):
        for j in range(n):
            z = nodes[i] - nodes[j]
            for om, wo in zip(sphere_pts, sphere_w):
                p = float(z @ om)
                if abs(p) <= 1e-13:
                    continue
                xp = nodes[i] - p * om
                xs = nodes[j] + p * om
                if np.any(xp < lo - eps) or np.any(xp > hi + eps) or np.any(xs < lo - eps) or np.any(xs > hi + eps):
                    continue
                c = 0.5 * sigma0 * abs(p) * wo * weights[j]
                gain = value_at(F, xp) * value_at(G, xs) + value_at(F, xs) * value_at(G, xp)
                loss = F[i] * G[j] + F[j] * G[i]
                out[i] += c * (gain - loss)
    # project out of span{W0^2 poly} along the 1/W0^2-weighted inner product
    polys = np.vstack([np.ones(n), nodes.T, np.sum(nodes**2, axis=1)])
    B = polys * W0**2  # columns of the range to remove
    # minimize sum w (out - B^T c)^2 / W0^2  subject to moments zero  <=> project
    Wm = weights / W0**2
    gram = (B * Wm) @ B.T
    coef = np.linalg.solve(gram, (B * Wm) @ out)
    return out - B.T @ coef


def nu_radial(xi, u, T, rho=1.0, sigma0=1.0, m=4000):
    """nu(xi) by 1D radial quadrature: sphere-averaged |a - r n| against M(r)."""
    from scipy.integrate import quad

    a = float(np.linalg.norm(np.asarray(xi) - np.asarray(u)))

    def avg(r):
        if r < a:
            return a + r * r / (3 * a)
        return r + a * a / (3 * r) if r > 0 else a

    def integrand(r):
        return 4 * math.pi * r * r * avg(r) * rho / (2 * math.pi * T) ** 1.5 * math.exp(-r * r / (2 * T))

    lim = 12 * math.sqrt(T) + a
    val = quad(integrand, 0, a, limit=200, epsabs=1e-14, epsrel=1e-12)[0] + quad(integrand, a, lim, limit=200, epsabs=1e-14, epsrel=1e-12)[0]
    # hard-sphere rate: sigma0 * int_{S^2} |zeta . omega| d omega = 2 pi sigma0 |zeta|
    return 2 * math.pi * sigma0 * val


def slab_linear_modes(K, nu, xi1, a0, x):
    """Bounded solution of xi1 f' = (K - diag nu) f with f(0, xi1 > 0) = a0 from the
    generalized eigenproblem L v = lam diag(xi1) v, keeping modes with Re lam < 0."""
    from scipy.linalg import eig

    lam, V = eig(K - np.diag(nu), np.diag(xi1))
    keep = lam.real < -1e-8
    pos = xi1 > 0
    c = np.linalg.solve(V[np.ix_(pos, keep)], a0[pos])
    out = (V[:, keep] * c) @ np.exp(np.outer(lam[keep], x))
    return out.T.real
