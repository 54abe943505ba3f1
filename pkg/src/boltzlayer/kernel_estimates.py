"""Quadrature estimates of the kernel integrals of K and the exponent window used in
the L^inf_x L^2_xi convolution bound."""

from __future__ import annotations

from dataclasses import dataclass, field
import math

import numpy as np

from .collision import LinearizedOperator, assemble_linearized, build_quadrature
from .velocity_grid import build_grid


class KernelEstimateError(RuntimeError):
    pass


def conjugate(p: float) -> float:
    return p / (p - 1.0)


def exponent_constraints(p: float, q: float) -> dict:
    """Each constraint of the (p, q) window with its slack (positive when satisfied)."""
    pp, qq = conjugate(p), conjugate(q)
    return {
        "p_lower": p - 3.0,
        "p_upper": 4.0 - p,
        "q_lower": q - 1.0,
        "q_upper": 3.0 - q,
        "p_lt_2q": 2.0 * q - p,
        "pq_lt_3p_minus_2q": 3.0 * p - 2.0 * q - p * q,
        # equivalent integrability conditions on the conjugates
        "inner_exponent": 3.0 - 0.5 * pp,
        "outer_exponent": 2.0 * qq / pp - 3.0,
    }


def feasible(p: float, q: float) -> bool:
    return all(v > 0 for v in exponent_constraints(p, q).values())


def scan_exponents(p_step: float = 0.02, q_step: float = 0.01, min_slack: float = 0.05) -> tuple[float, float, int]:
    """Scan the open box (3,4) x (1,3). Among pairs whose constraints all hold with
    slack >= min_slack, return the one with the largest outer integrability margin
    2q'/p' - 3 (it controls the xi tail of A), plus the number of feasible points."""
    ps = np.arange(3.0 + p_step, 4.0 - 0.5 * p_step, p_step)
    qs = np.arange(1.0 + q_step, 3.0 - 0.5 * q_step, q_step)
    best, count = None, 0
    for p in ps:
        for q in qs:
            p, q = round(float(p), 10), round(float(q), 10)
            if not feasible(p, q):
                continue
            count += 1
            c = exponent_constraints(p, q)
            if min(c.values()) < min_slack:
                continue
            if best is None or c["outer_exponent"] > best[0]:
                best = (c["outer_exponent"], p, q)
    if best is None:
        raise KernelEstimateError("no feasible (p, q) in the scanned window")
    return best[1], best[2], count


def kernel_alpha_integrals(op: LinearizedOperator, alpha: float) -> np.ndarray:
    """int |K(xi, xi')|^alpha dxi' at every node."""
    k = np.abs(op.kernel())
    return (k**alpha) @ op.grid.weights


def a_pq(op: LinearizedOperator, p: float, q: float) -> float:
    """(int (int |K|^{p'/2} dxi')^{2q'/p'} dxi)^{1/q'} with p', q' the conjugates."""
    pp, qq = conjugate(p), conjugate(q)
    inner = kernel_alpha_integrals(op, 0.5 * pp)
    return float(np.sum(op.grid.weights * inner ** (2.0 * qq / pp)) ** (1.0 / qq))


def bracket_envelope(op: LinearizedOperator, alpha: float) -> dict:
    """Smallest C with int |K|^alpha dxi' <= C <xi>^{-1} on the grid, and the fitted
    log-log slope of the integral against <xi> for diagnostics."""
    vals = kernel_alpha_integrals(op, alpha)
    br = op.grid.bracket()
    C = float(np.max(vals * br)) * (1.0 + 1e-12)
    nz = vals > 0
    slope = float(np.polyfit(np.log(br[nz]), np.log(vals[nz]), 1)[0])
    return {"alpha": alpha, "sup": float(vals.max()), "C": C, "loglog_slope": slope, "holds": bool(np.all(vals <= C / br))}


@dataclass
class KernelEstimateReport:
    p: float
    q: float
    p_conj: float
    q_conj: float
    feasible_count: int
    A: float
    sup_integrals: dict
    envelopes: list
    cutoff_table: list = field(default_factory=list)
    rejected: dict = field(default_factory=dict)

    @property
    def saturation(self) -> float | None:
        """Relative change of A between the last two cutoffs of the table."""
        if len(self.cutoff_table) < 2:
            return None
        a, b = self.cutoff_table[-2]["A"], self.cutoff_table[-1]["A"]
        return abs(b - a) / abs(b)

    def as_dict(self) -> dict:
        return {
            "p": self.p,
            "q": self.q,
            "p_conj": self.p_conj,
            "q_conj": self.q_conj,
            "feasible_count": self.feasible_count,
            "constraints": exponent_constraints(self.p, self.q),
            "A_pq": self.A,
            "sup_integrals": self.sup_integrals,
            "envelopes": self.envelopes,
            "cutoff_table": self.cutoff_table,
            "saturation": self.saturation,
            "rejected": self.rejected,
        }


def kernel_estimates(op: LinearizedOperator, refine: tuple = (1.25,), sphere_degree: int = 5, assemble=None) -> KernelEstimateReport:
    """Exponent scan plus quadrature estimates on `op`; each factor in `refine` adds a
    row for a grid with the same spacing and cutoff enlarged by that factor.
    `assemble(state, grid)` may supply (cached) operators for the refined grids."""
    p, q, count = scan_exponents()
    grid = op.grid
    rows = [{"cutoff": grid.cutoff, "per_axis": grid.per_axis_count, "A": a_pq(op, p, q)}]
    for f in refine:
        n = int(round(grid.per_axis_count * f))
        if not math.isclose(n / grid.per_axis_count, f, rel_tol=1e-9):
            raise KernelEstimateError(f"factor {f} does not keep the lattice spacing at {grid.per_axis_count} nodes")
        g2 = build_grid(n, grid.cutoff * f)
        if assemble is not None:
            op2 = assemble(op.state, g2)
        else:
            op2 = assemble_linearized(op.state, g2, build_quadrature(op.state, g2, sphere_degree))
        rows.append({"cutoff": g2.cutoff, "per_axis": n, "A": a_pq(op2, p, q)})
    return KernelEstimateReport(
        p=p,
        q=q,
        p_conj=conjugate(p),
        q_conj=conjugate(q),
        feasible_count=count,
        A=rows[0]["A"],
        sup_integrals={str(a): float(kernel_alpha_integrals(op, a).max()) for a in (1, 2)},
        envelopes=[bracket_envelope(op, a) for a in (1, 2)],
        cutoff_table=rows,
        rejected={"3.5,2.0": exponent_constraints(3.5, 2.0)},
    )
