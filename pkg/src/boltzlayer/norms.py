"""L^2, weighted L^inf and bracket norms on fields and trajectories."""

from __future__ import annotations

from dataclasses import dataclass
import math

import numpy as np

from .spatial import SpatialGrid
from .velocity_grid import VelocityGrid


class NormError(ValueError):
    pass


@dataclass(frozen=True)
class NormReport:
    L2: float
    Linf_beta: float
    beta: float
    sup_time: float | None = None
    kappa: float | None = None

    @property
    def bracket(self) -> float:
        return self.L2 + self.Linf_beta

    def as_dict(self) -> dict:
        d = {"L2": self.L2, "Linf_beta": self.Linf_beta, "bracket": self.bracket, "beta": self.beta}
        if self.sup_time is not None:
            d["sup_time"] = self.sup_time
            d["kappa"] = self.kappa
        return d


def _check_beta(beta: float) -> None:
    if not beta > 1.5:
        raise NormError(f"beta={beta} must exceed 3/2")


def l2_norm(values: np.ndarray, sgrid: SpatialGrid, vgrid: VelocityGrid) -> float:
    w = sgrid.x_weights[:, None, None, None] * sgrid.tangential_weight * vgrid.weights
    return math.sqrt(float(np.sum(w * np.asarray(values) ** 2)))


def linf_beta(values: np.ndarray, vgrid: VelocityGrid, beta: float) -> float:
    values = np.asarray(values)
    if values.size == 0:
        return 0.0
    return float(np.max(np.abs(values) * vgrid.bracket(beta)))


def bracket(values: np.ndarray, sgrid: SpatialGrid, vgrid: VelocityGrid, beta: float) -> float:
    return l2_norm(values, sgrid, vgrid) + linf_beta(values, vgrid, beta)


def norms(values: np.ndarray, sgrid: SpatialGrid, vgrid: VelocityGrid, beta: float) -> NormReport:
    _check_beta(beta)
    return NormReport(l2_norm(values, sgrid, vgrid), linf_beta(values, vgrid, beta), beta)


def trajectory_norm(traj, times, sgrid: SpatialGrid, vgrid: VelocityGrid, beta: float, kappa: float = 0.0, t0: float = 0.0) -> NormReport:
    """|||g|||_{t0,kappa,beta} = sup_t e^{kappa t} [[g(t)]]_beta over the samples."""
    _check_beta(beta)
    best = 0.0
    l2m = 0.0
    lbm = 0.0
    for v, t in zip(traj, times):
        if t < t0:
            continue
        a = l2_norm(v, sgrid, vgrid)
        b = linf_beta(v, vgrid, beta)
        best = max(best, math.exp(kappa * t) * (a + b))
        l2m = max(l2m, a)
        lbm = max(lbm, b)
    return NormReport(l2m, lbm, beta, sup_time=best, kappa=kappa)


def embedding_constant(vgrid: VelocityGrid, beta: float) -> float:
    """C(beta) with ||f(x,.)||_{L^2_xi} <= C(beta) ||f||_beta on the grid."""
    _check_beta(beta)
    return math.sqrt(float(np.sum(vgrid.weights * vgrid.bracket(-2.0 * beta))))


def linf_x_l2_xi(values: np.ndarray, vgrid: VelocityGrid) -> float:
    v = np.asarray(values)
    return math.sqrt(float(np.max(np.sum(vgrid.weights * v**2, axis=-1))))
