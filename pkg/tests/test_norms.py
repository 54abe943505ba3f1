import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from boltzlayer.norms import (
    NormError,
    bracket,
    embedding_constant,
    l2_norm,
    linf_beta,
    linf_x_l2_xi,
    norms,
    trajectory_norm,
)
from boltzlayer.spatial import build_spatial_grid
from boltzlayer.velocity_grid import build_grid

VG = build_grid(4, 3.0)
SG = build_spatial_grid(12, 10.0, ratio=1.1)


def test_zero_field():
    r = norms(np.zeros(SG.shape + (VG.size,)), SG, VG, 4.0)
    assert (r.L2, r.Linf_beta, r.bracket) == (0.0, 0.0, 0.0)


def test_weight_cancels():
    f = np.broadcast_to(VG.bracket(-4.0), SG.shape + (VG.size,))
    assert linf_beta(f, VG, 4.0) == 1.0


def test_beta_rejected():
    with pytest.raises(NormError):
        norms(np.zeros(SG.shape + (VG.size,)), SG, VG, 1.5)
    with pytest.raises(NormError):
        embedding_constant(VG, 1.0)


def test_l2_independent():
    rng = np.random.default_rng(0)
    f = rng.standard_normal(SG.shape + (VG.size,))
    w = SG.x_weights[:, None, None, None] * VG.weights
    assert l2_norm(f, SG, VG) == pytest.approx(np.sqrt(np.sum(w * f * f)), rel=1e-14)


@given(st.integers(0, 10_000), st.floats(1.6, 6.0))
@settings(max_examples=40, deadline=None)
def test_bracket_additivity_and_weights(seed, beta):
    rng = np.random.default_rng(seed)
    f = rng.standard_normal(SG.shape + (VG.size,)) * VG.bracket(-beta)
    r = norms(f, SG, VG, beta)
    assert r.bracket == r.L2 + r.Linf_beta
    assert r.L2 >= 0 and r.Linf_beta >= 0
    assert bracket(f, SG, VG, beta) == r.bracket
    # Linf_beta(<xi>^{b'-b} f) = Linf_b'(f)
    bp = beta + 1.3
    assert linf_beta(f * VG.bracket(bp - beta), VG, beta) == pytest.approx(linf_beta(f, VG, bp), rel=1e-14)
    # embedding into L^inf_x L^2_xi
    assert linf_x_l2_xi(f, VG) <= embedding_constant(VG, beta) * r.Linf_beta * (1 + 1e-12)


def test_trajectory_norm_kappa():
    f = np.ones(SG.shape + (VG.size,)) * VG.bracket(-4.0)
    traj = [f * np.exp(-0.5 * t) for t in (0.0, 1.0, 2.0)]
    r = trajectory_norm(traj, [0.0, 1.0, 2.0], SG, VG, 4.0, kappa=0.5)
    assert r.sup_time == pytest.approx(bracket(f, SG, VG, 4.0), rel=1e-12)
    r0 = trajectory_norm(traj, [0.0, 1.0, 2.0], SG, VG, 4.0, t0=1.5)
    assert r0.sup_time == pytest.approx(bracket(traj[2], SG, VG, 4.0), rel=1e-12)
    d = r.as_dict()
    assert d["bracket"] == d["L2"] + d["Linf_beta"] and d["kappa"] == 0.5
