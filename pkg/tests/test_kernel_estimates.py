import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from boltzlayer.collision import assemble_linearized, build_quadrature
from boltzlayer.kernel_estimates import (
    KernelEstimateError,
    a_pq,
    bracket_envelope,
    conjugate,
    exponent_constraints,
    feasible,
    kernel_alpha_integrals,
    kernel_estimates,
    scan_exponents,
)
from boltzlayer.velocity_grid import EquilibriumState, build_grid, default_cutoff


@pytest.fixture(scope="module")
def op4():
    s = EquilibriumState(1.0, (-2.0, 0.0, 0.0), 0.6)
    g = build_grid(4, default_cutoff(s.T_inf, s.u))
    return assemble_linearized(s, g, build_quadrature(s, g))


def test_rejects_3p5_2():
    # 3.5 * 2 = 7 is not below 3 * 3.5 - 2 * 2 = 6.5
    c = exponent_constraints(3.5, 2.0)
    assert c["pq_lt_3p_minus_2q"] == pytest.approx(-0.5)
    assert not feasible(3.5, 2.0)


def test_scanner_pair_is_feasible():
    p, q, count = scan_exponents()
    assert 3 < p < 4 and 1 < q < 3 and p < 2 * q and p * q < 3 * p - 2 * q
    assert count > 0 and feasible(p, q)
    with pytest.raises(KernelEstimateError):
        scan_exponents(min_slack=10.0)


@given(st.floats(3.001, 3.999), st.floats(1.001, 2.999))
@settings(max_examples=300, deadline=None)
def test_constraint_systems_equivalent(p, q):
    # conjugate form, product form and reciprocal form of the window agree
    pp, qq = conjugate(p), conjugate(q)
    conj = 0 < pp / 2 < 3 and 3 < 2 * qq / pp and p < 2 * q
    prod = p < 2 * q and p * q < 3 * p - 2 * q
    recip = 1 / q < 2 / p and 1 < 3 / q - 2 / p
    margin = abs(p * q - (3 * p - 2 * q))
    if margin > 1e-9:
        assert conj == prod == recip == feasible(p, q)


def test_a_pq_brute_force(op4):
    p, q = 3.06, 1.56
    K = op4.kernel()
    w = op4.grid.weights
    pp, qq = p / (p - 1), q / (q - 1)
    outer = 0.0
    for i in range(op4.grid.size):
        inner = sum(w[j] * abs(K[i, j]) ** (pp / 2) for j in range(op4.grid.size))
        outer += w[i] * inner ** (2 * qq / pp)
    assert a_pq(op4, p, q) == pytest.approx(outer ** (1 / qq), rel=1e-12)


def test_alpha_integrals_and_envelope(op4):
    k1 = kernel_alpha_integrals(op4, 1.0)
    assert np.allclose(k1, np.abs(op4.K_matrix).sum(axis=1), rtol=1e-12)
    env = bracket_envelope(op4, 2.0)
    assert env["holds"] and env["C"] > 0
    assert env["sup"] == pytest.approx(kernel_alpha_integrals(op4, 2.0).max())


def test_report_with_refinement(op4):
    r = kernel_estimates(op4, refine=(1.25,))
    d = r.as_dict()
    assert len(d["cutoff_table"]) == 2
    assert d["cutoff_table"][1]["per_axis"] == 5
    assert d["saturation"] == pytest.approx(abs(d["cutoff_table"][1]["A"] - d["A_pq"]) / d["cutoff_table"][1]["A"])
    assert set(d["sup_integrals"]) == {"1", "2"}
    assert min(d["rejected"]["3.5,2.0"].values()) < 0
    with pytest.raises(KernelEstimateError):
        kernel_estimates(op4, refine=(1.3,))
