"""Desk-scale covering geometries: flat complex tori, their covers, and line-bundle link data.

A model is a uniform grid on a flat torus of complex dimension ``n`` (real
axes ``0..2n-1``, complex plane ``j`` spanned by axes ``2j`` and ``2j+1``).
Two kinds of cover are supported:

* ``FiniteCover`` -- the grid is the total space ``M``; a finite group acts by
  site permutations and ``X = M/Gamma`` is tiled by the translates of ``U``.
* ``FreeAbelianCover`` -- the grid is the base torus ``X``; ``M`` is its
  ``Z^d`` cover obtained by unwrapping the first ``d`` axes.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import NonFreeAction, NonIntegralFlux, ResolutionTooCoarse, UnsupportedField

HERMITIAN_ATOL = 1e-12
FLUX_ATOL = 1e-9


# ---------------------------------------------------------------------------
# cover groups
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class FiniteCover:
    """Finite group acting freely on grid sites.

    ``elements[g][s]`` is the image of site ``s`` under group element ``g``;
    element 0 is the identity.  ``orders`` is set for translation covers and
    gives the cyclic order along each axis.
    """

    elements: tuple
    orders: tuple | None = None
    label: str = "finite"

    @property
    def order(self) -> int:
        return len(self.elements)


@dataclass(frozen=True)
class FreeAbelianCover:
    """``Z^d`` acting by lattice translations along the first ``d`` axes."""

    d: int

    @property
    def label(self) -> str:
        return f"Z^{self.d}"


def translation_cover(shape: Sequence[int], orders: Sequence[int]) -> FiniteCover:
    """Product of cyclic groups shifting axis ``a`` by ``shape[a] / orders[a]`` sites."""
    shape = tuple(int(s) for s in shape)
    orders = tuple(int(m) for m in orders)
    if len(orders) != len(shape):
        raise ValueError("one order per axis is required")
    for R, m in zip(shape, orders):
        if m < 1 or R % m:
            raise NonFreeAction(f"order {m} does not divide the {R}-site axis")
    grid = np.indices(shape).reshape(len(shape), -1)
    elements = []
    for shifts in itertools.product(*(range(m) for m in orders)):
        moved = [(grid[a] + shifts[a] * (shape[a] // orders[a])) % shape[a] for a in range(len(shape))]
        elements.append(np.ravel_multi_index(moved, shape))
    label = "x".join(f"Z/{m}" for m in orders if m > 1) or "trivial"
    return FiniteCover(tuple(elements), orders, label)


# ---------------------------------------------------------------------------
# model manifold
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ModelManifold:
    complex_dim: int
    lattice_basis: np.ndarray  # rows are the 2n period vectors
    resolution: int
    cover: FiniteCover | FreeAbelianCover
    fundamental: np.ndarray  # site indices of U

    @property
    def real_dim(self) -> int:
        return 2 * self.complex_dim

    @property
    def shape(self) -> tuple:
        return (self.resolution,) * self.real_dim

    @property
    def n_sites(self) -> int:
        return self.resolution**self.real_dim

    @property
    def cell_volume(self) -> float:
        return abs(float(np.linalg.det(self.lattice_basis))) / self.resolution**self.real_dim

    @property
    def spacing(self) -> np.ndarray:
        """Grid spacing per axis; only defined for an axis-aligned lattice basis."""
        B = self.lattice_basis
        if np.max(np.abs(B - np.diag(np.diag(B)))) > 0:
            raise UnsupportedField("lattice operators need an axis-aligned (diagonal) lattice basis")
        return np.abs(np.diag(B)) / self.resolution

    @property
    def mesh_h(self) -> float:
        return float(np.max(np.linalg.norm(self.lattice_basis, axis=1)) / self.resolution)

    @property
    def is_finite_cover(self) -> bool:
        return isinstance(self.cover, FiniteCover)

    @property
    def group_order(self) -> int | None:
        return self.cover.order if self.is_finite_cover else None

    @property
    def covered_axes(self) -> tuple:
        """Axes unwrapped in the cover (``Z^d`` case); empty for finite covers."""
        if self.is_finite_cover:
            return ()
        return tuple(range(self.cover.d))

    @property
    def volume_X(self) -> float:
        return self.cell_volume * len(self.fundamental)

    def multi_index(self) -> np.ndarray:
        """``(n_sites, 2n)`` integer grid coordinates in C order."""
        return np.indices(self.shape).reshape(self.real_dim, -1).T

    def site_coords(self) -> np.ndarray:
        return self.multi_index() / self.resolution @ self.lattice_basis

    def plane_area(self, j: int) -> float:
        """Area of complex plane ``j`` of the grid torus."""
        B = self.lattice_basis
        return abs(float(np.linalg.det(B[np.ix_([2 * j, 2 * j + 1], [2 * j, 2 * j + 1])])))

    def base_plane_area(self, j: int) -> float:
        """Area of complex plane ``j`` of the base ``X`` (translation covers divide it)."""
        area = self.plane_area(j)
        if self.is_finite_cover:
            if self.cover.orders is not None:
                area /= self.cover.orders[2 * j] * self.cover.orders[2 * j + 1]
            elif self.complex_dim == 1:
                area /= self.cover.order
        return area

    def with_resolution(self, resolution: int) -> "ModelManifold":
        cover = self.cover
        if self.is_finite_cover:
            if cover.orders is None:
                raise ValueError("only translation covers can be re-gridded")
            spec = {"kind": "translations", "orders": list(cover.orders)}
        else:
            spec = {"kind": "free_abelian", "d": cover.d}
        return build_torus_model(self.complex_dim, self.lattice_basis, resolution, spec)


def _resolve_cover(cover, shape) -> FiniteCover | FreeAbelianCover:
    if cover is None or cover == "trivial":
        return translation_cover(shape, [1] * len(shape))
    if isinstance(cover, (FiniteCover, FreeAbelianCover)):
        return cover
    kind = cover.get("kind", "trivial")
    if kind == "trivial":
        return translation_cover(shape, [1] * len(shape))
    if kind == "translations":
        orders = list(cover["orders"]) + [1] * (len(shape) - len(cover["orders"]))
        return translation_cover(shape, orders)
    if kind == "free_abelian":
        d = int(cover["d"])
        if not 1 <= d <= len(shape):
            raise ValueError(f"free abelian rank {d} outside [1, {len(shape)}]")
        return FreeAbelianCover(d)
    raise ValueError(f"unknown cover kind {kind!r}")


def build_torus_model(n: int, lattice_basis=None, resolution: int = 8, cover=None) -> ModelManifold:
    """Grid a flat complex torus of dimension ``n`` and attach a cover group.

    ``cover`` may be ``None`` (trivial group), a ``FiniteCover`` or
    ``FreeAbelianCover`` instance, or a dict such as
    ``{"kind": "translations", "orders": [2, 1]}`` or ``{"kind": "free_abelian", "d": 2}``.
    """
    if n < 1:
        raise ValueError("complex dimension must be >= 1")
    if resolution < 4:
        raise ResolutionTooCoarse(f"resolution {resolution} < 4")
    basis = np.eye(2 * n) if lattice_basis is None else np.asarray(lattice_basis, dtype=float)
    if basis.shape != (2 * n, 2 * n):
        raise ValueError(f"lattice basis must be {2 * n}x{2 * n}")
    if abs(np.linalg.det(basis)) < 1e-14:
        raise ValueError("lattice basis is degenerate")
    shape = (resolution,) * (2 * n)
    grp = _resolve_cover(cover, shape)
    n_sites = resolution ** (2 * n)

    if isinstance(grp, FreeAbelianCover):
        fundamental = np.arange(n_sites)
    else:
        ident = np.arange(n_sites)
        if not np.array_equal(grp.elements[0], ident):
            raise ValueError("first group element must be the identity")
        for g in grp.elements[1:]:
            if np.any(g == ident):
                raise NonFreeAction("a non-identity element fixes a grid site")
        orbit_min = np.min(np.stack(grp.elements), axis=0)
        fundamental = np.flatnonzero(orbit_min == ident)
        # every site lies in exactly one translate gU
        hits = np.zeros(n_sites, dtype=int)
        for g in grp.elements:
            np.add.at(hits, g[fundamental], 1)
        if not np.all(hits == 1):
            raise NonFreeAction("group translates of the fundamental domain do not tile the grid")

    model = ModelManifold(n, basis, int(resolution), grp, fundamental)
    model.fundamental.setflags(write=False)
    return model


# ---------------------------------------------------------------------------
# curvature fields
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class CurvatureField:
    values: np.ndarray  # (n_sites, n, n) complex Hermitian
    twist_rank: int = 1
    spec: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.values.shape[1]

    def is_diagonal(self, atol: float = HERMITIAN_ATOL) -> bool:
        off = self.values - np.einsum("sii->si", self.values)[:, :, None] * np.eye(self.n)
        return float(np.max(np.abs(off), initial=0.0)) <= atol

    def diagonal(self) -> np.ndarray:
        """Real diagonal entries, shape ``(n_sites, n)``."""
        return np.real(np.einsum("sii->si", self.values))


def _validate_field(model: ModelManifold, values: np.ndarray) -> None:
    if values.shape != (model.n_sites, model.complex_dim, model.complex_dim):
        raise ValueError("field shape does not match the model")
    herm = np.max(np.abs(values - np.conj(np.swapaxes(values, 1, 2))), initial=0.0)
    if herm > HERMITIAN_ATOL:
        raise UnsupportedField(f"curvature matrices are not Hermitian (defect {herm:.2e})")
    if model.is_finite_cover:
        for g in model.cover.elements[1:]:
            if not np.array_equal(values[g], values):
                raise UnsupportedField("curvature field is not periodic under the cover group")


def constant_curvature_field(model: ModelManifold, alpha, twist_rank: int = 1) -> CurvatureField:
    """``diag(alpha)`` at every site."""
    alpha = np.asarray(alpha, dtype=float)
    if alpha.shape != (model.complex_dim,):
        raise ValueError(f"need {model.complex_dim} eigenvalues")
    values = np.broadcast_to(np.diag(alpha).astype(complex), (model.n_sites,) + (model.complex_dim,) * 2).copy()
    values.setflags(write=False)
    return CurvatureField(values, int(twist_rank), {"kind": "constant", "alphas": alpha.tolist()})


def planewise_curvature_field(model: ModelManifold, planes: Sequence[dict], twist_rank: int = 1) -> CurvatureField:
    """Diagonal field whose ``j``-th entry varies along one axis of plane ``j``.

    Each entry of ``planes`` is ``{"mean", "amplitude", "mode", "axis", "phase"}``
    and produces ``mean + amplitude * cos(2 pi mode u + phase)`` where ``u`` is
    the fractional coordinate along axis ``2j + axis``.  Such fields are closed
    2-forms, so they are curvatures of genuine line bundles.
    """
    if len(planes) != model.complex_dim:
        raise ValueError(f"need one plane spec per complex dimension ({model.complex_dim})")
    idx = model.multi_index()
    diag = np.empty((model.n_sites, model.complex_dim))
    clean = []
    for j, p in enumerate(planes):
        mean = float(p.get("mean", 0.0))
        amp = float(p.get("amplitude", 0.0))
        mode = int(p.get("mode", 0))
        axis = int(p.get("axis", 0))
        phase = float(p.get("phase", 0.0))
        u = idx[:, 2 * j + axis] / model.resolution
        diag[:, j] = mean + amp * np.cos(2 * np.pi * mode * u + phase)
        clean.append({"mean": mean, "amplitude": amp, "mode": mode, "axis": axis, "phase": phase})
    values = np.zeros((model.n_sites, model.complex_dim, model.complex_dim), dtype=complex)
    values[:, range(model.complex_dim), range(model.complex_dim)] = diag
    _validate_field(model, values)
    values.setflags(write=False)
    return CurvatureField(values, int(twist_rank), {"kind": "planewise", "planes": clean})


def matrix_curvature_field(model: ModelManifold, values, twist_rank: int = 1) -> CurvatureField:
    """Arbitrary site-dependent Hermitian field (pointwise analysis only)."""
    values = np.array(values, dtype=complex)
    _validate_field(model, values)
    values.setflags(write=False)
    return CurvatureField(values, int(twist_rank), {"kind": "matrix"})


def alphas_from_degrees(model: ModelManifold, degrees: Sequence[float]) -> list:
    """Constant eigenvalues giving degree ``d_j`` on each complex plane of the base."""
    return [2 * np.pi * float(d) / model.base_plane_area(j) for j, d in enumerate(degrees)]


def field_from_spec(model: ModelManifold, spec: dict, twist_rank: int = 1) -> CurvatureField:
    kind = spec.get("kind", "constant")
    if kind == "constant":
        if "degrees" in spec:
            return constant_curvature_field(model, alphas_from_degrees(model, spec["degrees"]), twist_rank)
        return constant_curvature_field(model, spec["alphas"], twist_rank)
    if kind == "planewise":
        return planewise_curvature_field(model, spec["planes"], twist_rank)
    raise ValueError(f"cannot rebuild a field of kind {kind!r}")


# ---------------------------------------------------------------------------
# link phases
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class BundleLinkData:
    """U(1) parallel transports along grid edges for the bundle ``E^k``.

    ``phases[a]`` has the grid shape; entry ``s`` is the transport from ``s``
    to ``s + e_a``.  Entries for edges leaving a non-wrapped box are unused.
    """

    phases: np.ndarray  # (2n, *shape) complex, unit modulus
    power: int
    wrap: tuple  # per-axis periodicity of the grid the links live on
    offset: tuple = ()  # integer coordinates of the box corner (cover boxes)

    @property
    def shape(self) -> tuple:
        return self.phases.shape[1:]

    def twisted(self, theta: Sequence[float], axes: Sequence[int]) -> "BundleLinkData":
        """Bloch twist: multiply wrap-around links of ``axes`` by ``exp(i theta)``."""
        ph = self.phases.copy()
        for t, a in zip(theta, axes):
            sl = [slice(None)] * (ph.ndim - 1)
            sl[a] = -1
            ph[(a,) + tuple(sl)] *= np.exp(1j * t)
        ph.setflags(write=False)
        return BundleLinkData(ph, self.power, self.wrap, self.offset)

    def gauge_transformed(self, g: np.ndarray) -> "BundleLinkData":
        """``U_a(s) -> g(s) U_a(s) conj(g(s + e_a))`` (periodic neighbours)."""
        g = np.asarray(g).reshape(self.shape)
        ph = self.phases.copy()
        for a in range(ph.shape[0]):
            ph[a] = g * ph[a] * np.conj(np.roll(g, -1, axis=a))
        ph.setflags(write=False)
        return BundleLinkData(ph, self.power, self.wrap, self.offset)


def _plane_alpha(model: ModelManifold, field: CurvatureField, j: int) -> np.ndarray:
    """Curvature entry ``j`` as an ``R x R`` array over plane ``j``."""
    n = model.complex_dim
    if not field.is_diagonal():
        raise UnsupportedField("link phases need a diagonal curvature field")
    alpha = field.diagonal()[:, j].reshape(model.shape)
    others = tuple(a for a in range(2 * n) if a not in (2 * j, 2 * j + 1))
    plane = alpha[tuple(slice(None) if a in (2 * j, 2 * j + 1) else 0 for a in range(2 * n))]
    if others:
        expand = np.expand_dims(plane, others) if plane.ndim else plane
        if np.max(np.abs(alpha - expand)) > HERMITIAN_ATOL:
            raise UnsupportedField(f"curvature entry {j} varies outside its own complex plane")
    return plane


def plane_flux(model: ModelManifold, field: CurvatureField, k: int, j: int) -> np.ndarray:
    """Plaquette fluxes of ``E^k`` in plane ``j`` on the periodic grid (corner-averaged curvature)."""
    h = model.spacing
    a = _plane_alpha(model, field, j)
    avg = (a + np.roll(a, -1, 0) + np.roll(a, -1, 1) + np.roll(np.roll(a, -1, 0), -1, 1)) / 4
    return k * h[2 * j] * h[2 * j + 1] * avg


def _planar_gauge(F: np.ndarray, wrap_x: bool) -> tuple:
    """Landau-type gauge on an ``Lx x Ly`` plane with plaquette fluxes ``F``.

    y-links accumulate flux along x; x-links are trivial except the wrap-around
    column, which carries the column fluxes so that the seam plaquettes close.
    """
    theta_y = np.zeros_like(F)
    theta_y[1:] = np.cumsum(F[:-1], axis=0)
    theta_x = np.zeros_like(F)
    if wrap_x:
        col = F.sum(axis=0)
        chi = np.zeros(F.shape[1])
        chi[1:] = -np.cumsum(col[:-1])
        theta_x[-1] = chi
    return theta_x, theta_y


def _check_integrality(model: ModelManifold, field: CurvatureField) -> None:
    for j in range(model.complex_dim):
        total = float(np.sum(plane_flux(model, field, 1, j)))
        ratio = 1
        if model.is_finite_cover and model.cover.orders is not None:
            ratio = model.cover.orders[2 * j] * model.cover.orders[2 * j + 1]
        for label, flux in (("grid torus", total), ("base", total / ratio)):
            c = flux / (2 * np.pi)
            if abs(c - round(c)) > FLUX_ATOL:
                raise NonIntegralFlux(f"plane {j}: total flux over the {label} is 2pi*{c:.12g}")


def chern_numbers(model: ModelManifold, field: CurvatureField, k: int = 1) -> list:
    return [float(np.sum(plane_flux(model, field, k, j)) / (2 * np.pi)) for j in range(model.complex_dim)]


def link_phases_from_curvature(model: ModelManifold, field: CurvatureField, k: int) -> BundleLinkData:
    """Periodic link phases of ``E^k`` on the model grid."""
    if k < 1:
        raise ValueError("power k must be >= 1")
    _check_integrality(model, field)
    return box_link_phases(model, field, k, [0] * model.real_dim, list(model.shape), [True] * model.real_dim)


def box_link_phases(model: ModelManifold, field: CurvatureField, k: int, lo, hi, wrap) -> BundleLinkData:
    """Link phases on the box ``prod [lo_a, hi_a)`` of the cover.

    Curvature is extended periodically from the model grid.  Wrapped axes must
    span exactly one period.
    """
    n = model.complex_dim
    R = model.resolution
    lo = [int(v) for v in lo]
    hi = [int(v) for v in hi]
    wrap = tuple(bool(w) for w in wrap)
    shape = tuple(b - a for a, b in zip(lo, hi))
    for a in range(2 * n):
        if wrap[a] and shape[a] != R:
            raise ValueError("a wrapped axis must span one period")
    phases = np.ones((2 * n,) + shape, dtype=complex)
    for j in range(n):
        ax, ay = 2 * j, 2 * j + 1
        F_torus = plane_flux(model, field, k, j)
        ix = np.arange(lo[ax], hi[ax]) % R
        iy = np.arange(lo[ay], hi[ay]) % R
        F = F_torus[np.ix_(ix, iy)]
        tx, ty = _planar_gauge(F, wrap[ax])
        expand = tuple(a for a in range(2 * n) if a not in (ax, ay))
        for axis, t in ((ax, tx), (ay, ty)):
            t_full = np.expand_dims(np.exp(1j * t), expand) if expand else np.exp(1j * t)
            phases[axis] = np.broadcast_to(t_full, shape)
    phases.setflags(write=False)
    return BundleLinkData(phases, int(k), wrap, tuple(lo))


def plaquette_flux(links: BundleLinkData, a: int, b: int) -> np.ndarray:
    """Argument of the oriented plaquette product in the ``(a, b)`` plane (periodic grid)."""
    Ua, Ub = links.phases[a], links.phases[b]
    prod = Ua * np.roll(Ub, -1, axis=a) * np.conj(np.roll(Ua, -1, axis=b)) * np.conj(Ub)
    return np.angle(prod)


def orbit_partition(model: ModelManifold) -> list:
    """Brute-force orbit enumeration (used as a tiling oracle)."""
    if not model.is_finite_cover:
        return [[s] for s in range(model.n_sites)]
    seen = np.zeros(model.n_sites, dtype=bool)
    orbits = []
    for s in range(model.n_sites):
        if seen[s]:
            continue
        orb = sorted({int(g[s]) for g in model.cover.elements})
        seen[orb] = True
        orbits.append(orb)
    return orbits


__all__ = [
    "BundleLinkData",
    "CurvatureField",
    "FiniteCover",
    "FreeAbelianCover",
    "ModelManifold",
    "alphas_from_degrees",
    "box_link_phases",
    "build_torus_model",
    "chern_numbers",
    "constant_curvature_field",
    "field_from_spec",
    "link_phases_from_curvature",
    "matrix_curvature_field",
    "orbit_partition",
    "planewise_curvature_field",
    "plane_flux",
    "plaquette_flux",
    "translation_cover",
]
