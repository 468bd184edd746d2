import csv
import math

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from holomorse.errors import LambdaOnJump
from holomorse.geomodel import build_torus_model, constant_curvature_field, field_from_spec, link_phases_from_curvature
from holomorse.lattice_op import Bloch, DirichletU, assemble_dolbeault
from holomorse.spectral_count import (
    count_below,
    dense_count,
    gershgorin,
    harmonic_cluster,
    inertia,
    kernel_dimension,
    lowest_eigs,
    predicted_density,
    weyl_limit_compare,
    write_counts_csv,
)

TWO_PI = 2 * math.pi


def random_sparse_hermitian(rng, n, density=0.05):
    A = sp.random(n, n, density=density, random_state=rng, dtype=complex, data_rvs=lambda k: rng.standard_normal(k) + 1j * rng.standard_normal(k))
    return sp.csr_matrix(A + A.conj().T + sp.diags(rng.standard_normal(n)))


@pytest.mark.parametrize("n", [5, 40, 250, 600])
def test_inertia_matches_dense(n):
    rng = np.random.default_rng(n)
    A = random_sparse_hermitian(rng, n)
    w = np.linalg.eigvalsh(A.toarray())
    for shift in rng.uniform(w[0] - 1, w[-1] + 1, 6):
        gap = np.min(np.abs(w - shift))
        if gap < 1e-6:
            continue
        assert inertia(A, shift, method="block")[0] == int(np.sum(w < shift))
        assert inertia(A, shift)[0] == int(np.sum(w < shift))


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 60), st.integers(0, 10**6), st.floats(-3, 3))
def test_count_below_equals_dense(n, seed, lam):
    A = random_sparse_hermitian(np.random.default_rng(seed), n, 0.2)
    res = count_below(A, lam)
    if res.certified:
        assert res.count == dense_count(A, lam)


def test_gershgorin_extremes():
    m = build_torus_model(1, resolution=8)
    H = assemble_dolbeault(m, link_phases_from_curvature(m, constant_curvature_field(m, [TWO_PI]), 1), 0)
    lo, hi = gershgorin(H.matrix)
    assert count_below(H, lo - 1).count == 0
    assert count_below(H, hi + 1).count == H.dimension


def test_count_monotone_in_lambda():
    m = build_torus_model(1, resolution=10)
    H = assemble_dolbeault(m, link_phases_from_curvature(m, constant_curvature_field(m, [2 * TWO_PI]), 2), 0)
    counts = [count_below(H, lam).count for lam in np.linspace(-1, 60, 25)]
    assert counts == sorted(counts)


def test_uncertified_on_eigenvalue():
    A = sp.diags([0.0, 1.0, 1.0, 2.0]).tocsr()
    r = count_below(A, 1.0)
    assert not r.certified
    assert count_below(A, 1.5).certified and count_below(A, 1.5).count == 3


def test_lowest_eigs_flat_kernel_constant_vector():
    m = build_torus_model(1, resolution=8)
    H = assemble_dolbeault(m, link_phases_from_curvature(m, constant_curvature_field(m, [0.0]), 1), 0)
    low = lowest_eigs(H, 3, vectors=True)
    assert abs(low.values[0]) < 1e-12
    v = low.vectors[:, 0]
    assert np.allclose(v / v[0], 1.0)
    assert low.kernel_dim == 1


def test_lowest_eigs_full_small_matches_char_poly():
    A = np.array([[2.0, 1.0, 0.0], [1.0, 3.0, 1.0], [0.0, 1.0, 4.0]])
    low = lowest_eigs(sp.csr_matrix(A), 3)
    assert np.allclose(low.values, np.sort(np.roots(np.poly(A)).real), atol=1e-12)


@pytest.mark.parametrize("d", [1, 2])
def test_elliptic_k2_has_2d_states_below_gap(d):
    m = build_torus_model(1, resolution=24)
    f = field_from_spec(m, {"kind": "constant", "degrees": [d]})
    H = assemble_dolbeault(m, link_phases_from_curvature(m, f, 2), 0)
    low = kernel_dimension(H)
    assert low.kernel_dim == 2 * d
    mid = math.sqrt(low.gap_threshold * low.first_nonzero)
    assert count_below(H, mid).count == 2 * d


def test_lanczos_path_on_large_operator():
    m = build_torus_model(1, resolution=48)
    f = field_from_spec(m, {"kind": "constant", "degrees": [3]})
    low = kernel_dimension(assemble_dolbeault(m, link_phases_from_curvature(m, f, 2), 0))
    assert low.method == "lanczos" and low.kernel_dim == 6


def test_harmonic_cluster_split_level():
    # a narrow cluster of 8 values below a wide gap, with two exact zeros inside
    vals = np.concatenate([[0.0, 0.0], np.full(4, 2.3e-3), np.full(2, 4.6e-3), np.linspace(5.7, 9.0, 30)])
    A = sp.diags(vals).tocsr()
    low = harmonic_cluster(A, expected=8)
    assert low.kernel_dim == 8 and low.first_nonzero == pytest.approx(5.7)
    assert kernel_dimension(A).kernel_dim == 2


def test_weyl_flat_small():
    m = build_torus_model(1, resolution=16, cover={"kind": "free_abelian", "d": 2})
    rows = weyl_limit_compare(m, {"kind": "constant", "alphas": [0.0]}, 0, 40.0, [4])
    assert rows[0].predicted == pytest.approx(40.0 / (2 * math.pi))
    assert rows[0].rel_error < 0.5


def test_weyl_rejects_lambda_on_jump():
    m = build_torus_model(1, resolution=8)
    with pytest.raises(LambdaOnJump):
        weyl_limit_compare(m, {"kind": "constant", "degrees": [1]}, 0, 0.0, [1])


def test_weyl_empty_form_degree():
    m = build_torus_model(1, resolution=8)
    rows = weyl_limit_compare(m, {"kind": "constant", "degrees": [1]}, 2, 1.0, [1])
    assert rows[0].count == 0 and rows[0].predicted == 0.0


def test_predicted_density_elliptic_bar():
    m = build_torus_model(1, resolution=8)
    f = field_from_spec(m, {"kind": "constant", "degrees": [2]})
    assert predicted_density(m, f, 0, 0.0, bar=True) == pytest.approx(2.0)


def test_counts_csv_columns(tmp_path):
    rows = [
        {"k": 1, "q": 0, "lambda": 0.5, "bc": "bloch", "theta": (0.1, 0.2), "count": 3, "certified": True, "method": "eigvalsh"},
        {"k": 1, "q": 0, "lambda": 0.5, "bc": "periodic", "count": 2, "certified": False, "method": "inertia"},
    ]
    p = tmp_path / "c.csv"
    write_counts_csv(rows, p)
    got = list(csv.reader(open(p)))
    assert got[0] == ["k", "q", "lambda", "bc", "theta_0", "theta_1", "count", "certified", "method"]
    assert got[1] == ["1", "0", "0.5", "bloch", "0.1", "0.2", "3", "true", "eigvalsh"]
    assert got[2][-2] == "false" and got[2][4] == ""
