import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from holomorse.errors import DegeneratePoint, NotHermitian, TruncationInsufficient
from holomorse.geomodel import build_torus_model, constant_curvature_field, planewise_curvature_field
from holomorse.pointspec import (
    NuBParams,
    curvature_eigenvalues,
    density,
    jump_margin,
    nu_b,
    nu_b_bar,
    pointwise_density,
    pointwise_morse_limit,
    stratify,
    weyl_density,
)

TWO_PI = 2 * math.pi


def test_curvature_eigenvalues_examples():
    a = curvature_eigenvalues(np.diag([TWO_PI]))
    assert a.alphas == pytest.approx((TWO_PI,)) and a.signature_q == 0
    b = curvature_eigenvalues(np.diag([TWO_PI, -TWO_PI]))
    assert b.alphas == pytest.approx((-TWO_PI, TWO_PI)) and b.signature_q == 1


def test_curvature_eigenvalues_match_characteristic_polynomial():
    rng = np.random.default_rng(3)
    for _ in range(20):
        Z = rng.standard_normal((3, 3)) + 1j * rng.standard_normal((3, 3))
        A = Z + Z.conj().T
        roots = np.sort(np.roots(np.poly(A)).real)
        assert np.allclose(curvature_eigenvalues(A).alphas, roots, atol=1e-10)


def test_curvature_eigenvalues_rejects_non_hermitian():
    with pytest.raises(NotHermitian):
        curvature_eigenvalues(np.array([[1.0, 1.0], [0.0, 1.0]]))


def test_stratify_examples():
    m1 = build_torus_model(1, resolution=8)
    s = stratify(constant_curvature_field(m1, [TWO_PI]), m1)
    assert s.volumes[0] == pytest.approx(1.0) and s.volumes[1] == 0.0
    m2 = build_torus_model(2, resolution=4)
    s = stratify(constant_curvature_field(m2, [TWO_PI, -TWO_PI]), m2)
    assert s.volumes[1] == pytest.approx(1.0) and s.volumes[0] == 0.0 and s.volumes[2] == 0.0


def test_stratify_sign_flipping_field_by_enumeration():
    m = build_torus_model(1, resolution=16)
    f = planewise_curvature_field(m, [{"mean": 0.0, "amplitude": 3.0, "mode": 1, "axis": 0, "phase": 0.3}])
    s = stratify(f, m)
    a = f.values[:, 0, 0].real
    assert s.volumes[0] == pytest.approx(np.sum(a > 1e-9 * 3) * m.cell_volume)
    assert s.volumes[1] == pytest.approx(np.sum(a < -1e-9 * 3) * m.cell_volume)


def test_nu_b_examples():
    p = NuBParams(2, (1.0,))
    assert nu_b(0.0, p) == 0.0
    assert nu_b(2.5, p) == pytest.approx(1 / TWO_PI, abs=1e-12)
    assert nu_b(3.5, p) == pytest.approx(1 / math.pi, abs=1e-12)
    assert nu_b(1.0, NuBParams(2, ())) == pytest.approx(1 / (4 * math.pi), abs=1e-12)


def test_nu_b_bar_examples():
    p = NuBParams(2, (1.0,))
    assert nu_b(1.0, p) == 0.0
    assert nu_b_bar(1.0, p) == pytest.approx(1 / TWO_PI, abs=1e-12)
    assert nu_b_bar(2.0, p) == nu_b(2.0, p)
    assert nu_b_bar(0.0, p) == 0.0


def test_truncation_guard():
    with pytest.raises(TruncationInsufficient):
        nu_b(10.0, NuBParams(2, (1.0,), truncation_P=1))
    assert nu_b(4.0, NuBParams(2, (1.0,), truncation_P=1)) == pytest.approx(nu_b(4.0, NuBParams(2, (1.0,))))


def test_params_validation():
    with pytest.raises(ValueError):
        NuBParams(3, (1.0,))
    with pytest.raises(ValueError):
        NuBParams(2, (1.0, 2.0))
    with pytest.raises(ValueError):
        NuBParams(2, (0.0,))


def test_step_jump_size():
    B = (1.3, 0.7)
    p = NuBParams(4, B)
    level = 3 * 1.3 + 0.7
    jump = nu_b(level + 1e-9, p) - nu_b(level - 1e-9, p)
    assert jump == pytest.approx(B[0] * B[1] * 2.0 ** (2 - 4) * math.pi ** (-2), rel=1e-12)


@pytest.mark.parametrize("N", [2, 4, 6, 8])
def test_free_term_is_weyl_density(N):
    for lam in (0.1, 1.0, 7.3, 50.0):
        assert nu_b(lam, NuBParams(N, ())) == pytest.approx(weyl_density(lam, N), rel=1e-12)


@settings(max_examples=60, deadline=None)
@given(
    st.lists(st.floats(0.1, 5.0), min_size=1, max_size=3),
    st.floats(0.0, 30.0),
    st.floats(0.0, 5.0),
)
def test_nu_b_monotone_and_bar_dominates(B, lam, dl):
    p = NuBParams(2 * len(B) + 2, tuple(B))
    assert nu_b(lam + dl, p) >= nu_b(lam, p) - 1e-15
    assert nu_b_bar(lam, p) >= nu_b(lam, p)


def test_pointwise_density_examples():
    a = 3.0
    assert density([a], 0, 0.0, bar=True) == pytest.approx(a / TWO_PI)
    assert density([a], 1, 0.0, bar=True) == 0.0
    assert density([2.0, 5.0], 0, 0.0, bar=True) == pytest.approx(10.0 / TWO_PI**2)
    with pytest.raises(DegeneratePoint):
        pointwise_density(curvature_eigenvalues(np.diag([0.0, 1.0])), 0, 1.0)


def test_pointwise_morse_limit_examples():
    assert pointwise_morse_limit(curvature_eigenvalues(np.diag([TWO_PI])), 0) == pytest.approx(1.0)
    assert pointwise_morse_limit(curvature_eigenvalues(np.diag([TWO_PI])), 1) == 0.0
    assert pointwise_morse_limit(curvature_eigenvalues(np.diag([-TWO_PI, TWO_PI])), 1) == pytest.approx(1.0)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-6.0, 6.0).filter(lambda x: abs(x) > 0.05), min_size=1, max_size=3), st.floats(0.0, 10.0))
def test_density_permutation_invariant(alphas, lam):
    q = len([a for a in alphas if a < 0])
    ref = density(alphas, q, lam)
    for perm in itertools.permutations(alphas):
        assert density(list(perm), q, lam) == pytest.approx(ref, rel=1e-12, abs=1e-15)


def test_jump_margin_detects_levels():
    assert jump_margin([TWO_PI], 0, 0.0) == pytest.approx(0.0, abs=1e-12)
    assert jump_margin([TWO_PI], 0, 1.0) == pytest.approx(1.0)
    assert math.isinf(jump_margin([0.0], 0, 1.0))
