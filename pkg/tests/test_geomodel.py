import math

import numpy as np
import pytest

from holomorse.errors import NonFreeAction, NonIntegralFlux, ResolutionTooCoarse
from holomorse.geomodel import (
    FiniteCover,
    alphas_from_degrees,
    build_torus_model,
    chern_numbers,
    constant_curvature_field,
    field_from_spec,
    link_phases_from_curvature,
    orbit_partition,
    plane_flux,
    plaquette_flux,
)

TWO_PI = 2 * math.pi


def test_trivial_cover_model():
    m = build_torus_model(1, resolution=8)
    assert m.n_sites == 64 and len(m.fundamental) == 64
    assert m.cell_volume == pytest.approx(1 / 64)
    assert m.group_order == 1


def test_half_shift_cover_tiles():
    m = build_torus_model(1, resolution=8, cover={"kind": "translations", "orders": [2, 1]})
    assert len(m.fundamental) == 32
    orbits = orbit_partition(m)
    assert len(orbits) == 32 and all(len(o) == 2 for o in orbits)
    # exactly one fundamental site per orbit
    fund = set(int(s) for s in m.fundamental)
    assert all(len(fund.intersection(o)) == 1 for o in orbits)
    assert m.volume_X == pytest.approx(0.5)


def test_resolution_guard():
    with pytest.raises(ResolutionTooCoarse):
        build_torus_model(1, resolution=3)


def test_non_free_action_rejected():
    ident = np.arange(16)
    flip = np.roll(ident.reshape(4, 4), 2, axis=0).ravel()  # half-period shift, free
    fixes = ident.copy()
    fixes[[1, 2]] = [2, 1]
    with pytest.raises(NonFreeAction):
        build_torus_model(1, resolution=4, cover=FiniteCover((ident, fixes)))
    with pytest.raises(NonFreeAction):
        build_torus_model(1, resolution=6, cover={"kind": "translations", "orders": [4, 1]})
    build_torus_model(1, resolution=4, cover=FiniteCover((ident, flip)))


def test_degree_one_field_chern_number():
    m = build_torus_model(1, resolution=8)
    f = constant_curvature_field(m, [TWO_PI])
    assert chern_numbers(m, f, 1) == pytest.approx([1.0])
    L = link_phases_from_curvature(m, f, 3)
    total = np.sum(plaquette_flux(L, 0, 1))
    assert total == pytest.approx(6 * math.pi, abs=1e-9)
    assert chern_numbers(m, f, 3) == pytest.approx([3.0])


def test_plaquette_flux_matches_curvature():
    m = build_torus_model(1, resolution=16)
    f = constant_curvature_field(m, [TWO_PI])
    L = link_phases_from_curvature(m, f, 2)
    F = plaquette_flux(L, 0, 1)
    # every plaquette (including seams) carries k h^2 alpha modulo 2 pi
    expect = 2 * TWO_PI / 256
    assert np.allclose(np.angle(np.exp(1j * (F - expect))), 0.0, atol=1e-12)


def test_zero_field_links_trivial():
    m = build_torus_model(2, resolution=4)
    f = constant_curvature_field(m, [0.0, 0.0])
    for k in (1, 5):
        assert np.allclose(link_phases_from_curvature(m, f, k).phases, 1.0)
    assert stratify_degenerate(m, f)


def stratify_degenerate(m, f):
    from holomorse.pointspec import stratify

    s = stratify(f, m)
    return s.degenerate_volume == pytest.approx(1.0) and all(v == 0 for v in s.volumes.values())


def test_non_integral_flux_rejected():
    m = build_torus_model(1, resolution=8)
    with pytest.raises(NonIntegralFlux):
        link_phases_from_curvature(m, constant_curvature_field(m, [1.5 * TWO_PI]), 1)


def test_base_flux_must_be_integral_on_cover():
    m = build_torus_model(1, resolution=8, cover={"kind": "translations", "orders": [2, 1]})
    # degree 1 on the double cover is degree 1/2 on the base
    with pytest.raises(NonIntegralFlux):
        link_phases_from_curvature(m, constant_curvature_field(m, [TWO_PI]), 1)
    f = field_from_spec(m, {"kind": "constant", "degrees": [1]})
    assert chern_numbers(m, f) == pytest.approx([2.0])


def test_mixed_signature_field():
    m = build_torus_model(2, resolution=4)
    f = constant_curvature_field(m, [TWO_PI, -TWO_PI])
    from holomorse.pointspec import stratify

    assert stratify(f, m).volumes[1] == pytest.approx(1.0)


def test_gauge_transform_preserves_plaquettes():
    rng = np.random.default_rng(0)
    m = build_torus_model(1, resolution=8)
    L = link_phases_from_curvature(m, constant_curvature_field(m, [2 * TWO_PI]), 1)
    g = np.exp(1j * rng.uniform(0, TWO_PI, m.shape))
    Lg = L.gauge_transformed(g)
    assert np.allclose(np.exp(1j * plaquette_flux(Lg, 0, 1)), np.exp(1j * plaquette_flux(L, 0, 1)), atol=1e-12)


def test_alphas_from_degrees_uses_base_area():
    m = build_torus_model(1, np.diag([2.0, 1.0]), 8)
    assert alphas_from_degrees(m, [1]) == pytest.approx([math.pi])
    assert np.sum(plane_flux(m, constant_curvature_field(m, [math.pi]), 1, 0)) == pytest.approx(TWO_PI)
