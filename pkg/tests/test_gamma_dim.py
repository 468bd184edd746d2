import math

import numpy as np
import pytest
import scipy.sparse as sp

from holomorse.errors import FormBoundViolated, LambdaOnSpectrumEdge, NotAComplex, NotAProjection
from holomorse.gamma_dim import (
    BlochFamilyRep,
    BlochGammaOperator,
    FiniteGammaComplex,
    FiniteGroupRep,
    bloch_spectral_projection,
    change_basis,
    dirichlet_candidate,
    dirichlet_lower_bound_check,
    dolbeault_family,
    euler_inequalities,
    gamma_counting,
    gamma_dim,
    gamma_dim_by_order,
    laplacian_betti,
    midpoint_grid,
    random_equivariant_complex,
    rank_perturbation_check,
    sandwich_check,
    spectral_projection,
    variational_lower_bound,
)
from holomorse.geomodel import build_torus_model, constant_curvature_field, field_from_spec, link_phases_from_curvature
from holomorse.spectral_count import count_below


def chain():
    """Free lattice Laplacian on Z: fibre 2 - 2 cos(theta), Dirichlet cell = one site."""
    return BlochGammaOperator(
        fiber=lambda th: sp.csr_matrix([[2.0 - 2.0 * math.cos(th[0])]]),
        d=1,
        fiber_dim=1,
        dirichlet=sp.csr_matrix([[2.0]]),
        dirichlet_dofs=np.array([0]),
    )


def z2_family(R=8, d=1, k=1, q=0, degrees=True):
    m = build_torus_model(1, resolution=R, cover={"kind": "translations", "orders": [2, 1]})
    f = field_from_spec(m, {"kind": "constant", "degrees": [d]}) if degrees else constant_curvature_field(m, [0.0])
    return m, f, dolbeault_family(m, link_phases_from_curvature(m, f, k), q)


def test_chain_band_measure():
    op = chain()
    assert gamma_counting(op, 2.0).value == pytest.approx(0.5, abs=1e-12)
    assert gamma_counting(op, 4.0 + 1e-9).value == pytest.approx(1.0)
    assert gamma_counting(op, -0.5).value == 0.0
    # arccos measure: {2 - 2cos t <= 1} has measure 1/3
    assert gamma_counting(op, 1.0).value == pytest.approx(1 / 3, rel=0.005)


def test_chain_projection_gamma_dim():
    op = chain()
    rep = bloch_spectral_projection(op, 2.0, points=64)
    assert gamma_dim(rep) == pytest.approx(0.5)
    full = BlochFamilyRep(*midpoint_grid(8, 1), tuple(np.eye(3) for _ in range(8)))
    assert gamma_dim(full) == pytest.approx(3.0)
    zero = BlochFamilyRep(*midpoint_grid(8, 1), tuple(np.zeros((3, 3)) for _ in range(8)))
    assert gamma_dim(zero) == 0.0


def test_not_a_projection():
    bad = BlochFamilyRep(*midpoint_grid(2, 1), (0.5 * np.eye(2), 0.5 * np.eye(2)))
    with pytest.raises(NotAProjection):
        gamma_dim(bad)
    _, _, op = z2_family()
    P = np.zeros((op.dimension, op.dimension))
    P[0, 0] = 1.0  # a single site is not translation invariant
    with pytest.raises(NotAProjection):
        gamma_dim(FiniteGroupRep(P, op.actions, op.fundamental))


def test_chain_dirichlet_lower_bound():
    op = chain()
    r = dirichlet_lower_bound_check(op, 1.0)
    assert r.n_gamma > 0 and r.n_dirichlet == 0 and r.holds
    r = dirichlet_lower_bound_check(op, -1.0)
    assert r.n_gamma == 0 and r.n_dirichlet == 0 and r.holds
    r = dirichlet_lower_bound_check(op, 100.0)
    assert r.n_gamma == pytest.approx(1.0) and r.n_dirichlet == 1 and r.holds


def test_spectrum_edge_detected():
    flat = BlochGammaOperator(fiber=lambda th: sp.csr_matrix([[1.0]]), d=1, fiber_dim=1)
    with pytest.raises(LambdaOnSpectrumEdge):
        gamma_counting(flat, 1.0)


def test_finite_group_count_is_cover_count_over_order():
    m, f, op = z2_family(R=8, d=1, k=2)
    assert op.equivariance_defect() < 1e-12
    for lam in (0.5, 3.0, 9.0, 25.0):
        g = gamma_counting(op, lam)
        assert g.value == pytest.approx(count_below(op.matrix, lam).count / 2)
        assert g.projector_value == pytest.approx(g.value, abs=1e-9)
        rep = spectral_projection(op, lam)
        assert gamma_dim(rep) == pytest.approx(gamma_dim_by_order(rep), abs=1e-9)


def test_gamma_counting_monotone_and_trivial_group():
    m = build_torus_model(1, resolution=8)
    f = field_from_spec(m, {"kind": "constant", "degrees": [1]})
    op = dolbeault_family(m, link_phases_from_curvature(m, f, 2), 0)
    vals = [gamma_counting(op, lam).value for lam in np.linspace(0.1, 40, 12)]
    assert vals == sorted(vals)
    for lam in (0.1, 7.0, 33.0):
        assert gamma_counting(op, lam).value == count_below(op.matrix, lam).count


def test_bloch_kernel_count_equals_kd():
    m = build_torus_model(1, resolution=8, cover={"kind": "free_abelian", "d": 2})
    f = field_from_spec(m, {"kind": "constant", "degrees": [1]})
    for k in (1, 2, 3):
        op = dolbeault_family(m, link_phases_from_curvature(m, f, k), 0)
        assert gamma_counting(op, 1e-3, theta_points=8).value == pytest.approx(k)


def test_projection_additivity():
    _, _, op = z2_family(R=8, d=1, k=2)
    a = spectral_projection(op, 1.0)
    b = spectral_projection(op, 12.0)
    diff = FiniteGroupRep(b.projection - a.projection, op.actions, op.fundamental)
    assert gamma_dim(diff) + gamma_dim(a) == pytest.approx(gamma_dim(b), abs=1e-9)


def test_sandwich_trivial_group_coincides():
    m = build_torus_model(1, resolution=8)
    f = field_from_spec(m, {"kind": "constant", "degrees": [1]})
    r = sandwich_check(m, f, 1, 0, 3.0, s=0.5)
    assert r.lower == r.n_gamma == r.upper and r.holds


def test_sandwich_below_spectrum():
    m = build_torus_model(1, resolution=8, cover={"kind": "translations", "orders": [2, 1]})
    f = field_from_spec(m, {"kind": "constant", "degrees": [1]})
    r = sandwich_check(m, f, 2, 0, -1.0)
    assert (r.lower, r.n_gamma) == (0, 0.0) and r.holds


def test_sandwich_z2_flat_small():
    m = build_torus_model(1, resolution=6, cover={"kind": "free_abelian", "d": 2})
    f = constant_curvature_field(m, [0.0])
    r = sandwich_check(m, f, 4, 0, 5.0, theta_points=16)
    assert r.holds and r.certified
    assert float(r.lower).is_integer() and float(r.upper).is_integer()


def test_variational_constants_and_dirichlet_candidate():
    m, f, op = z2_family(R=8, degrees=False)
    one = np.ones(op.dimension) / math.sqrt(op.dimension)
    rep = FiniteGroupRep(np.outer(one, one), op.actions, op.fundamental)
    assert variational_lower_bound(op, rep, 0.0) == pytest.approx(0.5)
    m, f, op = z2_family(R=12, d=1, k=2)
    for lam in (0.5, 10.0, 30.0):
        cand = dirichlet_candidate(op, lam)
        lb = variational_lower_bound(op, cand, lam)
        assert lb == pytest.approx(count_below(op.dirichlet, lam).count, abs=1e-9)
        assert lb <= gamma_counting(op, lam).value + 1e-12


def test_variational_violation_has_witness():
    _, _, op = z2_family(R=8, degrees=False)
    w, V = np.linalg.eigh(op.matrix.toarray())
    v = V[:, -1]
    P = np.outer(v, v.conj())
    P = sum(T @ P @ T.conj().T for T in (a.toarray() for a in op.actions))
    P = P / np.max(np.linalg.eigvalsh(P))
    Q = np.linalg.eigh(P)[1][:, np.linalg.eigvalsh(P) > 0.5]
    rep = FiniteGroupRep(Q @ Q.conj().T, op.actions, op.fundamental)
    with pytest.raises(FormBoundViolated) as exc:
        variational_lower_bound(op, rep, 0.1)
    assert exc.value.witness is not None


def test_rank_perturbation_examples():
    _, _, op = z2_family(R=8, degrees=False)
    H = op.matrix.toarray()
    w = np.linalg.eigvalsh(H)
    mu = float(w[w > 1e-9][0])
    one = np.ones(op.dimension) / math.sqrt(op.dimension)
    rec = rank_perturbation_check(op, mu * np.outer(one, one), mu)
    assert rec.rank_gamma == pytest.approx(0.5) and rec.n_gamma == pytest.approx(0.5) and rec.holds
    rec = rank_perturbation_check(op, mu * np.eye(op.dimension), mu)
    assert rec.rank_gamma == pytest.approx(op.dimension / 2) and rec.holds
    rec = rank_perturbation_check(op, np.zeros_like(H), -1.0)
    assert rec.rank_gamma == 0 and rec.n_gamma == 0 and rec.holds
    with pytest.raises(FormBoundViolated):
        rank_perturbation_check(op, np.zeros_like(H), mu)


def test_rank_perturbation_bloch_chain():
    op = chain()
    rec = rank_perturbation_check(op, lambda th: np.array([[3.0]]), 3.0, points=16)
    assert rec.rank_gamma == pytest.approx(1.0) and rec.holds


def test_euler_trivial_complexes():
    rec = euler_inequalities(FiniteGammaComplex((3,), ()))
    assert rec[0].h_bar == 3 and rec[0].equality_at_top
    D = np.array([[1.0, 2.0], [0.0, 1.0]])
    rec = euler_inequalities(FiniteGammaComplex((2, 2), (D,)))
    assert [r.h_bar for r in rec] == [0, 0]
    assert rec[0].inequality_holds and rec[0].partial_h < rec[0].partial_l
    assert rec[1].equality_at_top


def test_not_a_complex():
    A = np.ones((1, 1))
    with pytest.raises(NotAComplex):
        euler_inequalities(FiniteGammaComplex((1, 1, 1), (A, A)))


def test_random_z3_complex_and_basis_invariance():
    rng = np.random.default_rng(11)
    cx, betti = random_equivariant_complex(rng, 3, [2, 4, 3, 1])
    rec = euler_inequalities(cx)
    assert [r.h_bar for r in rec] == pytest.approx(list(betti))
    assert laplacian_betti(cx) == pytest.approx(list(betti))
    assert all(r.inequality_holds for r in rec) and rec[-1].equality_at_top
    rec2 = euler_inequalities(change_basis(cx, rng))
    assert [r.h_bar for r in rec2] == pytest.approx([r.h_bar for r in rec])
