"""Gamma-dimensions, Gamma-counting functions and the comparison inequalities.

Two kinds of Gamma-periodic operator are handled:

* ``FiniteGammaOperator`` -- a matrix on the total grid ``M`` together with
  the unitary action of a finite group (magnetic translations), and
* ``BlochGammaOperator`` -- a ``Z^d``-periodic operator given by its Bloch
  fibres ``H(theta)`` on one fundamental domain.

``N_Gamma(lam, H)`` is ``N(lam, H)/|Gamma|`` in the first case and the average
of the fibre counts over the dual torus in the second.
"""

from __future__ import annotations

import itertools
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.linalg as la
import scipy.sparse as sp

from .errors import FormBoundViolated, InconsistentLinks, LambdaOnSpectrumEdge, NotAComplex, NotAProjection
from .geomodel import BundleLinkData, CurvatureField, ModelManifold, link_phases_from_curvature
from .lattice_op import (
    Bloch,
    DirichletU,
    DirichletUs,
    LatticeOperator,
    assemble_dolbeault,
    default_width,
    ims_defect_bound,
    ims_partition,
    partition_links,
)
from .spectral_count import count_below

PROJ_TOL = 1e-10
SVD_RTOL = 1e-8
DENSE_FIBER = 400
EDGE_WEIGHT = 0.01

# ---------------------------------------------------------------------------
# Gamma-periodic operators
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class FiniteGammaOperator:
    matrix: sp.csr_matrix
    actions: tuple  # unitary dof maps, identity first
    fundamental: np.ndarray  # dof indices over one fundamental domain
    dirichlet: LatticeOperator | sp.spmatrix | None = None
    dirichlet_dofs: np.ndarray | None = None  # dofs of M carrying the Dirichlet problem

    @property
    def order(self) -> int:
        return len(self.actions)

    @property
    def dimension(self) -> int:
        return self.matrix.shape[0]

    def equivariance_defect(self) -> float:
        A = self.matrix
        worst = 0.0
        for T in self.actions:
            D = T @ A - A @ T
            worst = max(worst, float(np.max(np.abs(D.data), initial=0.0)) if sp.issparse(D) else float(np.max(np.abs(D))))
        return worst


@dataclass(eq=False)
class BlochGammaOperator:
    fiber: Callable  # theta tuple -> sparse Hermitian matrix
    d: int
    fiber_dim: int
    dirichlet: LatticeOperator | sp.spmatrix | None = None
    dirichlet_dofs: np.ndarray | None = None  # fibre dofs carrying the Dirichlet problem
    base_dense: np.ndarray | None = None  # untwisted fibre, for batched dense spectra
    winding: np.ndarray | None = None  # (d, D, D) seam crossings of each entry
    _spectra: dict = field(default_factory=dict, repr=False)

    def batch_spectra(self, thetas: np.ndarray, chunk: int = 1024) -> np.ndarray:
        """Fibre spectra for many angles at once (requires the dense seam data)."""
        out = []
        for i in range(0, len(thetas), chunk):
            th = np.asarray(thetas[i : i + chunk], dtype=float)
            ph = np.exp(1j * np.einsum("td,dij->tij", th, self.winding))
            out.append(np.linalg.eigvalsh(self.base_dense[None] * ph))
        return np.concatenate(out) if out else np.zeros((0, self.fiber_dim))

    def spectrum(self, theta) -> np.ndarray:
        key = tuple(float(t) for t in theta)
        if key not in self._spectra:
            A = self.fiber(key)
            A = A.matrix if isinstance(A, LatticeOperator) else A
            self._spectra[key] = np.linalg.eigvalsh(sp.csr_matrix(A).toarray())
        return self._spectra[key]


def _mat(A):
    return A.matrix if isinstance(A, LatticeOperator) else A


def magnetic_translation_gauge(links: BundleLinkData, perm: np.ndarray) -> np.ndarray:
    """Phases ``g`` making ``(T u)(pi x) = g(x) u(x)`` commute with the link Laplacian.

    Solves ``g(x + e_a) = g(x) U_a(x) conj(U_a(pi x))`` along axis paths and
    verifies it on every edge.
    """
    shape = links.shape
    nd = len(shape)
    U = links.phases.reshape(nd, -1)
    ratio = (U * np.conj(U[:, perm])).reshape((nd,) + shape)
    g = np.zeros(shape, dtype=complex)
    g[(0,) * nd] = 1.0
    for a in range(nd):
        for i in range(1, shape[a]):
            cur = tuple(i if b == a else (slice(None) if b < a else 0) for b in range(nd))
            prev = tuple(i - 1 if b == a else (slice(None) if b < a else 0) for b in range(nd))
            g[cur] = g[prev] * ratio[(a,) + prev]
    for a in range(nd):
        lhs = np.roll(g, -1, axis=a)
        if np.max(np.abs(lhs - g * ratio[a])) > 1e-9:
            raise InconsistentLinks("links are not invariant under the group up to gauge")
    return g.ravel()


def _dof_action(site_perm: np.ndarray, phases: np.ndarray, n_comp: int, r: int) -> sp.csr_matrix:
    m = site_perm.size
    comp, site, rr = np.meshgrid(np.arange(n_comp), np.arange(m), np.arange(r), indexing="ij")
    src = ((comp * m + site) * r + rr).ravel()
    dst = ((comp * m + site_perm[site]) * r + rr).ravel()
    val = phases[site].ravel()
    N = n_comp * m * r
    return sp.csr_matrix((val, (dst, src)), shape=(N, N))


def _dofs_of_sites(sites: np.ndarray, n_sites: int, n_comp: int, r: int) -> np.ndarray:
    comp, rr = np.meshgrid(np.arange(n_comp), np.arange(r), indexing="ij")
    out = (comp.ravel()[:, None] * n_sites + sites[None, :]) * r + rr.ravel()[:, None]
    return np.sort(out.ravel())


def _dirichlet_embedding(model: ModelManifold, op: LatticeOperator) -> np.ndarray:
    """Dof index on the model grid of every Dirichlet dof (component, site, rank order)."""
    r = int(op.info.get("twist_rank", 1))
    n_comp = op.fiber_dim // r
    sites = np.ravel_multi_index(tuple(np.mod(op.sites, model.resolution).T), model.shape)
    m = sites.size
    comp, idx, rr = np.meshgrid(np.arange(n_comp), np.arange(m), np.arange(r), indexing="ij")
    return ((comp * model.n_sites + sites[idx]) * r + rr).ravel()


def finite_dolbeault_family(
    model: ModelManifold, links: BundleLinkData, q: int, twist_rank: int = 1, method: str = "weitzenbock"
) -> FiniteGammaOperator:
    H = assemble_dolbeault(model, links, q, Bloch(), twist_rank, method)
    H0 = assemble_dolbeault(model, links, q, DirichletU(), twist_rank, method)
    n_comp = H.fiber_dim // twist_rank
    actions = tuple(
        _dof_action(g, magnetic_translation_gauge(links, g), n_comp, twist_rank) for g in model.cover.elements
    )
    fund = _dofs_of_sites(np.asarray(model.fundamental), model.n_sites, n_comp, twist_rank)
    return FiniteGammaOperator(H.matrix, actions, fund, H0, _dirichlet_embedding(model, H0))


def bloch_dolbeault_family(
    model: ModelManifold, links: BundleLinkData, q: int, twist_rank: int = 1, method: str = "weitzenbock"
) -> BlochGammaOperator:
    base = assemble_dolbeault(model, links, q, Bloch((0.0,) * model.cover.d), twist_rank, method)
    fiber, wind = seam_twister(base, model)
    H0 = assemble_dolbeault(model, links, q, DirichletU(), twist_rank, method)
    dense = wdense = None
    if base.dimension <= DENSE_FIBER:
        dense = base.matrix.toarray()
        A = base.matrix.tocoo()
        wdense = np.zeros((model.cover.d,) + A.shape)
        wdense[:, A.row, A.col] = wind
    return BlochGammaOperator(fiber, model.cover.d, base.dimension, H0, _dirichlet_embedding(model, H0), dense, wdense)


def seam_twister(base: LatticeOperator, model: ModelManifold) -> tuple:
    """``(theta -> H(theta), winding)`` from the untwisted fibre.

    Every entry coupling sites across the seam of covered axis ``a`` picks up
    ``exp(i theta_a)`` per forward crossing, which reproduces the twisted link
    assembly for couplings shorter than half a period.
    """
    A = base.matrix.tocoo()
    R = model.resolution
    site = (np.arange(base.dimension) // int(base.info.get("twist_rank", 1))) % model.n_sites
    xs = np.array(np.unravel_index(site[A.row], model.shape))
    ys = np.array(np.unravel_index(site[A.col], model.shape))
    axes = model.covered_axes
    wind = np.stack([((ys[a] - xs[a]) - (np.mod(ys[a] - xs[a] + R // 2, R) - R // 2)) // R * -1 for a in axes])
    row, col, data, shape = A.row, A.col, A.data, A.shape

    def fiber(theta):
        ph = np.exp(1j * (np.asarray(theta, dtype=float) @ wind))
        return sp.csr_matrix((data * ph, (row, col)), shape=shape)

    return fiber, wind


def dolbeault_family(model, links, q, twist_rank=1, method="weitzenbock"):
    if model.is_finite_cover:
        return finite_dolbeault_family(model, links, q, twist_rank, method)
    return bloch_dolbeault_family(model, links, q, twist_rank, method)


# ---------------------------------------------------------------------------
# Gamma-module representations
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class FiniteGroupRep:
    projection: np.ndarray
    actions: tuple
    fundamental: np.ndarray

    @property
    def order(self) -> int:
        return len(self.actions)


@dataclass(frozen=True, eq=False)
class BlochFamilyRep:
    thetas: np.ndarray  # (m, d)
    weights: np.ndarray  # sum to 1
    projections: tuple  # one fibre projection per theta


def _check_projection(P: np.ndarray) -> None:
    herm = float(np.max(np.abs(P - P.conj().T), initial=0.0))
    idem = float(np.max(np.abs(P @ P - P), initial=0.0))
    if herm > PROJ_TOL or idem > PROJ_TOL:
        raise NotAProjection(f"not an orthogonal projection (hermitian {herm:.2e}, idempotent {idem:.2e})")


def validate_rep(rep) -> None:
    if isinstance(rep, FiniteGroupRep):
        P = rep.projection
        _check_projection(P)
        for T in rep.actions:
            Td = T.toarray() if sp.issparse(T) else np.asarray(T)
            c = float(np.max(np.abs(Td @ P - P @ Td), initial=0.0))
            if c > PROJ_TOL:
                raise NotAProjection(f"projection does not commute with the group (defect {c:.2e})")
    else:
        for P in rep.projections:
            _check_projection(P)
        if abs(float(np.sum(rep.weights)) - 1.0) > 1e-12:
            raise ValueError("quadrature weights must sum to 1")


def gamma_dim(rep, check: bool = True) -> float:
    """Trace of the projection over one fundamental domain (per unit dual-torus volume)."""
    if check:
        validate_rep(rep)
    if isinstance(rep, FiniteGroupRep):
        return float(np.real(np.sum(np.diag(rep.projection)[rep.fundamental])))
    return float(sum(w * np.real(np.trace(P)) for w, P in zip(rep.weights, rep.projections)))


def gamma_dim_by_order(rep: FiniteGroupRep) -> float:
    """``Tr(P) / |Gamma|`` (equal to :func:`gamma_dim` for invariant projections)."""
    return float(np.real(np.trace(rep.projection))) / rep.order


def spectral_projection(op: FiniteGammaOperator, lam: float) -> FiniteGroupRep:
    w, V = np.linalg.eigh(_mat(op.matrix).toarray())
    Vl = V[:, w <= lam]
    return FiniteGroupRep(Vl @ Vl.conj().T, op.actions, op.fundamental)


def midpoint_grid(points: int, d: int) -> tuple:
    one = -np.pi + 2 * np.pi * (np.arange(points) + 0.5) / points
    thetas = np.array(list(itertools.product(one, repeat=d))) if d else np.zeros((1, 0))
    weights = np.full(len(thetas), 1.0 / len(thetas))
    return thetas, weights


def bloch_spectral_projection(op: BlochGammaOperator, lam: float, points: int = 16) -> BlochFamilyRep:
    thetas, weights = midpoint_grid(points, op.d)
    projs = []
    for th in thetas:
        A = _mat(op.fiber(tuple(th)))
        w, V = np.linalg.eigh(sp.csr_matrix(A).toarray())
        Vl = V[:, w <= lam]
        projs.append(Vl @ Vl.conj().T)
    return BlochFamilyRep(thetas, weights, tuple(projs))


# ---------------------------------------------------------------------------
# Gamma-counting
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GammaCount:
    lam: float
    value: float
    method: str  # "finite" | "bloch"
    certified: bool
    theta_points: int = 0
    converged: bool = True
    uncertified_weight: float = 0.0
    projector_value: float | None = None
    trace: tuple = ()  # ((theta...), count) pairs of the final grid

    def to_dict(self) -> dict:
        d = asdict(self)
        d["trace"] = [list(t) + [c] for t, c in self.trace]
        return d


def _fiber_count(op: BlochGammaOperator, theta, lam: float) -> tuple:
    if op.fiber_dim <= DENSE_FIBER:
        w = op.spectrum(theta)
        delta = 1e-8 * max(1.0, float(np.max(np.abs(w))))
        return int(np.sum(w <= lam)), not bool(np.any(np.abs(w - lam) <= delta))
    res = count_below(op.fiber(tuple(theta)), lam)
    return res.count, res.certified


def _bloch_average(op: BlochGammaOperator, lam: float, points: int, workers: int) -> tuple:
    thetas, weights = midpoint_grid(points, op.d)
    keys = [tuple(float(t) for t in th) for th in thetas]
    if op.base_dense is not None:
        spec = op.batch_spectra(thetas)
        delta = 1e-8 * max(1.0, float(np.max(np.abs(spec))))
        counts = np.sum(spec <= lam, axis=1).astype(float)
        ok = ~np.any(np.abs(spec - lam) <= delta, axis=1)
        bad = float(np.sum(weights[~ok]))
        return float(np.dot(weights, counts)), bad, tuple(zip(keys, (int(c) for c in counts)))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            out = list(pool.map(lambda th: _fiber_count(op, th, lam), keys))
    else:
        out = [_fiber_count(op, th, lam) for th in keys]
    counts = np.array([c for c, _ in out], dtype=float)
    bad = float(np.sum(weights[[not ok for _, ok in out]]))
    return float(np.dot(weights, counts)), bad, tuple(zip(keys, (int(c) for c in counts)))


def gamma_counting(
    op,
    lam: float,
    theta_points: int = 64,
    refine: bool = True,
    rtol: float = 0.005,
    max_points: int | None = None,
    workers: int = 1,
    projector_check: bool = True,
) -> GammaCount:
    """``N_Gamma(lam, H)``.

    For ``Z^d`` the midpoint grid is doubled until successive averages differ by
    less than ``rtol`` (relative) or ``max_points`` per circle is reached.
    """
    lam = float(lam)
    if isinstance(op, FiniteGammaOperator):
        res = count_below(op.matrix, lam)
        value = res.count / op.order
        proj = None
        if projector_check and op.dimension <= 1500:
            proj = gamma_dim(spectral_projection(op, lam), check=False)
        return GammaCount(lam, value, "finite", res.certified, projector_value=proj)
    if max_points is None:
        max_points = {1: 1024, 2: 256}.get(op.d, 32)
    pts = theta_points
    value, bad, trace = _bloch_average(op, lam, pts, workers)
    converged = not refine
    while refine and pts * 2 <= max_points:
        nxt, bad, trace = _bloch_average(op, lam, pts * 2, workers)
        pts *= 2
        change = abs(nxt - value)
        value = nxt
        if change <= rtol * max(abs(value), 1e-12) or (change == 0.0):
            converged = True
            break
    if bad > EDGE_WEIGHT:
        raise LambdaOnSpectrumEdge(f"uncertified fibres carry {bad:.1%} of the quadrature weight at lambda={lam}")
    return GammaCount(lam, value, "bloch", bad == 0.0, pts, converged, bad, None, trace)


# ---------------------------------------------------------------------------
# Dirichlet comparison and the sandwich
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DirichletRecord:
    lam: float
    n_gamma: float
    n_dirichlet: int
    holds: bool
    certified: bool

    def to_dict(self) -> dict:
        return asdict(self)


def dirichlet_lower_bound_check(op, lam: float, **kw) -> DirichletRecord:
    """``N_Gamma(lam, H) >= N(lam, H_0)`` with ``H_0`` the Dirichlet problem on ``U``."""
    g = gamma_counting(op, lam, **kw)
    d = count_below(_mat(op.dirichlet), lam)
    return DirichletRecord(float(lam), g.value, d.count, bool(g.value >= d.count - 1e-12), bool(g.certified and d.certified))


@dataclass(frozen=True)
class SandwichRecord:
    k: int
    q: int
    lam: float
    lower: int
    n_gamma: float
    upper: int
    C_used: float
    C_measured: float
    s: float
    lower_holds: bool
    upper_holds: bool
    certified: bool
    dims: tuple  # (dim H_U, dim fibre or M, dim H_Us)

    @property
    def holds(self) -> bool:
        return self.lower_holds and self.upper_holds

    def to_dict(self) -> dict:
        return asdict(self)


def sandwich_check(
    model: ModelManifold,
    field: CurvatureField,
    k: int,
    q: int,
    lam: float,
    twist_rank: int | None = None,
    method: str = "weitzenbock",
    s: float | None = None,
    theta_points: int = 64,
    workers: int = 1,
) -> SandwichRecord:
    """``N(lam, H|U) <= N_Gamma(lam, H) <= N(lam + C/sqrt k, H|U_s)`` with ``C`` from IMS."""
    r = field.twist_rank if twist_rank is None else int(twist_rank)
    links = link_phases_from_curvature(model, field, k)
    fam = dolbeault_family(model, links, q, r, method)
    lower = count_below(_mat(fam.dirichlet), lam)
    g = gamma_counting(fam, lam, theta_points=theta_points, workers=workers, projector_check=False)
    s = default_width(k, model) if s is None else float(s)
    part = ims_partition(model, s)
    Hw = assemble_dolbeault(part.model, partition_links(part, links), q, Bloch(), r, method)
    fiber = None
    if not model.is_finite_cover:

        def fiber(theta):
            return assemble_dolbeault(model, links, q, Bloch(tuple(theta)), r, method)

    bound = ims_defect_bound(Hw, part, k, fiber=fiber)
    Hs = assemble_dolbeault(model, links, q, DirichletUs(s), r, method)
    shift = bound.C_certified / math.sqrt(k)
    upper = count_below(Hs, lam + shift)
    dims = (_mat(fam.dirichlet).shape[0], fam.dimension if isinstance(fam, FiniteGammaOperator) else fam.fiber_dim, Hs.dimension)
    return SandwichRecord(
        int(k),
        int(q),
        float(lam),
        lower.count,
        g.value,
        upper.count,
        bound.C_certified,
        bound.C,
        s,
        bool(lower.count <= g.value + 1e-12),
        bool(g.value <= upper.count + 1e-12),
        bool(lower.certified and g.certified and upper.certified),
        (int(dims[0]), int(dims[1]), int(dims[2])),
    )


# ---------------------------------------------------------------------------
# variational certificates and rank perturbation
# ---------------------------------------------------------------------------


def _range_basis(P: np.ndarray) -> np.ndarray:
    w, V = np.linalg.eigh((P + P.conj().T) / 2)
    return V[:, w > 0.5]


def _form_check(A, V: np.ndarray, lam: float) -> None:
    if V.shape[1] == 0:
        return
    A = sp.csr_matrix(_mat(A))
    M = V.conj().T @ (A @ V)
    w, Y = np.linalg.eigh((M + M.conj().T) / 2)
    tol = 1e-10 * max(1.0, float(np.max(np.abs(A.data), initial=0.0)))
    if w[-1] > lam + tol:
        raise FormBoundViolated(f"h(f,f) = {w[-1]:.6g} (f,f) exceeds lambda = {lam:.6g}", witness=V @ Y[:, -1])


def variational_lower_bound(op, candidate, lam: float) -> float:
    """Certified lower bound ``dim_Gamma L <= N_Gamma(lam, H)`` for ``h <= lam`` on ``L``."""
    validate_rep(candidate)
    if isinstance(op, FiniteGammaOperator):
        _form_check(op.matrix, _range_basis(candidate.projection), lam)
    else:
        for th, P in zip(candidate.thetas, candidate.projections):
            _form_check(op.fiber(tuple(th)), _range_basis(P), lam)
    return gamma_dim(candidate, check=False)


def dirichlet_candidate(op, lam: float, points: int = 8):
    """Dirichlet eigenfunctions on ``U`` extended by zero, with all their translates."""
    H0 = sp.csr_matrix(_mat(op.dirichlet)).toarray()
    w, V = np.linalg.eigh(H0)
    V = V[:, w <= lam]
    if isinstance(op, FiniteGammaOperator):
        E = np.zeros((op.dimension, V.shape[1]), dtype=complex)
        E[op.dirichlet_dofs] = V
        blocks = [T @ E for T in op.actions]
        B = np.hstack(blocks) if blocks else E
        Q = la.orth(B) if B.shape[1] else B
        return FiniteGroupRep(Q @ Q.conj().T, op.actions, op.fundamental)
    E = np.zeros((op.fiber_dim, V.shape[1]), dtype=complex)
    E[op.dirichlet_dofs] = V
    P = E @ E.conj().T
    thetas, weights = midpoint_grid(points, op.d)
    return BlochFamilyRep(thetas, weights, tuple(P for _ in thetas))


@dataclass(frozen=True)
class RankPerturbationRecord:
    mu: float
    eps: float
    rank_gamma: float
    n_gamma: float
    holds: bool

    def to_dict(self) -> dict:
        return asdict(self)


def _norm2(A: np.ndarray) -> float:
    return float(np.linalg.norm(A, 2)) if A.size else 0.0


def _rank(A: np.ndarray) -> int:
    if A.size == 0:
        return 0
    sv = np.linalg.svd(A, compute_uv=False)
    return int(np.sum(sv > SVD_RTOL * sv[0])) if sv.size and sv[0] > 0 else 0


def rank_perturbation_check(op, T, mu: float, points: int = 32) -> RankPerturbationRecord:
    """``N_Gamma(mu - eps, H) <= rank_Gamma T`` whenever ``H + T >= mu``.

    ``T`` is a matrix (finite groups) or a callable ``theta -> matrix`` (Bloch).
    """
    mu = float(mu)
    eps = 1e-6 * abs(mu) if mu != 0 else 1e-12

    def dense(A):
        A = _mat(A)
        return A.toarray() if sp.issparse(A) else np.asarray(A)

    def check_floor(S: np.ndarray):
        w, V = np.linalg.eigh((S + S.conj().T) / 2)
        if w[0] < mu - 1e-10 * max(1.0, abs(mu)):
            raise FormBoundViolated(f"H + T has eigenvalue {w[0]:.6g} below mu = {mu:.6g}", witness=V[:, 0])

    if isinstance(op, FiniteGammaOperator):
        Td = dense(T)
        check_floor(dense(op.matrix) + Td)
        p = _rank(Td) / op.order
        n = gamma_counting(op, mu - eps, projector_check=False).value
    else:
        thetas, weights = midpoint_grid(points, op.d)
        p = 0.0
        for th, wt in zip(thetas, weights):
            Td = dense(T(tuple(th)))
            check_floor(dense(op.fiber(tuple(th))) + Td)
            p += wt * _rank(Td)
        n = gamma_counting(op, mu - eps, theta_points=points, refine=False).value
    return RankPerturbationRecord(mu, eps, float(p), float(n), bool(n <= p + 1e-9))


# ---------------------------------------------------------------------------
# complexes of Gamma-modules
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class FiniteGammaComplex:
    dims: tuple  # raw dimensions of L_0..L_n
    differentials: tuple  # d_q : L_q -> L_{q+1}, dense
    group_order: int = 1
    actions: tuple | None = None  # per space: tuple of unitary matrices (generators suffice)

    def validate(self, tol: float = 1e-12) -> None:
        for q, D in enumerate(self.differentials):
            if D.shape != (self.dims[q + 1], self.dims[q]):
                raise NotAComplex(f"d_{q} has shape {D.shape}")
        for q in range(len(self.differentials) - 1):
            a, b = self.differentials[q], self.differentials[q + 1]
            scale = max(1.0, _norm2(a) * _norm2(b))
            if np.max(np.abs(b @ a), initial=0.0) > tol * scale:
                raise NotAComplex(f"d_{q + 1} d_{q} != 0")
        if self.actions is not None:
            for q, D in enumerate(self.differentials):
                for Tq, Tq1 in zip(self.actions[q], self.actions[q + 1]):
                    scale = max(1.0, _norm2(D))
                    if np.max(np.abs(Tq1 @ D - D @ Tq), initial=0.0) > tol * scale:
                        raise NotAComplex(f"d_{q} is not equivariant")


@dataclass(frozen=True)
class EulerRecord:
    q: int
    h_bar: float
    l: float
    partial_h: float
    partial_l: float
    inequality_holds: bool
    equality_at_top: bool | None

    def to_dict(self) -> dict:
        return asdict(self)


def euler_inequalities(cx: FiniteGammaComplex, tol: float = 1e-8) -> list:
    """Gamma-normalised reduced cohomology and the partial alternating-sum inequalities."""
    cx.validate()
    m = cx.group_order
    n = len(cx.dims) - 1
    ranks = [_rank(D) for D in cx.differentials]
    h = []
    for q in range(n + 1):
        rq = ranks[q] if q < len(ranks) else 0
        rp = ranks[q - 1] if q >= 1 else 0
        h.append((cx.dims[q] - rq - rp) / m)
    l = [d / m for d in cx.dims]
    out = []
    for q in range(n + 1):
        ph = sum((-1) ** (q - j) * h[j] for j in range(q + 1))
        pl = sum((-1) ** (q - j) * l[j] for j in range(q + 1))
        top = abs(ph - pl) <= tol if q == n else None
        out.append(EulerRecord(q, h[q], l[q], ph, pl, bool(ph <= pl + tol), top))
    return out


def laplacian_betti(cx: FiniteGammaComplex, rtol: float = SVD_RTOL) -> list:
    """Oracle: ``dim ker(d^* d + d d^*) / |Gamma|`` per degree."""
    n = len(cx.dims) - 1
    out = []
    for q in range(n + 1):
        L = np.zeros((cx.dims[q], cx.dims[q]), dtype=complex)
        if q < len(cx.differentials):
            D = cx.differentials[q]
            L += D.conj().T @ D
        if q >= 1:
            D = cx.differentials[q - 1]
            L += D @ D.conj().T
        if cx.dims[q] == 0:
            out.append(0.0)
            continue
        w = np.linalg.eigvalsh(L)
        scale = max(float(np.max(np.abs(w))), 1e-300)
        out.append(float(np.sum(w <= rtol * scale)) / cx.group_order)
    return out


def _random_unitary(rng, n: int) -> np.ndarray:
    if n == 0:
        return np.zeros((0, 0), dtype=complex)
    Z = rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))
    Q, R = np.linalg.qr(Z)
    return Q * (np.diag(R) / np.abs(np.diag(R)))


def random_equivariant_complex(rng: np.random.Generator, group_order: int, multiplicities: Sequence[int]) -> tuple:
    """Random complex of ``Z/m``-modules ``L_q = C[Z/m] (x) C^{a_q}``.

    Built character by character in the Fourier basis, where equivariant maps
    are block diagonal; each block complex gets random ranks.  Returns the
    complex and the exact Gamma-normalised Betti numbers of the construction.
    """
    m = int(group_order)
    a = [int(v) for v in multiplicities]
    L = len(a)
    F = np.exp(-2j * np.pi * np.outer(np.arange(m), np.arange(m)) / m) / math.sqrt(m)
    blocks = [[None] * m for _ in range(L - 1)]
    betti = np.zeros(L)
    for chi in range(m):
        ranks = []
        prev = 0
        for q in range(L - 1):
            top = min(a[q] - prev, a[q + 1])
            r = int(rng.integers(0, top + 1)) if top > 0 else 0
            ranks.append(r)
            prev = r
        Qs = [_random_unitary(rng, aq) for aq in a]
        prev = 0
        for q in range(L - 1):
            r = ranks[q]
            M = rng.standard_normal((r, r)) + 1j * rng.standard_normal((r, r)) + 3 * np.eye(r)
            D = Qs[q + 1][:, :r] @ M @ Qs[q][:, prev : prev + r].conj().T
            blocks[q][chi] = D
            prev = r
        for q in range(L):
            rq = ranks[q] if q < L - 1 else 0
            rp = ranks[q - 1] if q >= 1 else 0
            betti[q] += a[q] - rq - rp
    diffs = []
    for q in range(L - 1):
        B = la.block_diag(*blocks[q]) if m > 1 else blocks[q][0]
        # block-diag over characters is (chi, i) ordered; site layout is (g, i)
        left = np.kron(F.conj().T, np.eye(a[q + 1]))
        right = np.kron(F, np.eye(a[q]))
        diffs.append(left @ B @ right)
    shift = np.roll(np.eye(m), 1, axis=0)
    actions = tuple((np.kron(shift, np.eye(aq)),) for aq in a)
    cx = FiniteGammaComplex(tuple(m * aq for aq in a), tuple(diffs), m, actions)
    return cx, betti / m


def change_basis(cx: FiniteGammaComplex, rng: np.random.Generator) -> FiniteGammaComplex:
    """Apply a random equivariant unitary to each ``L_q`` (identity on the group factor)."""
    m = cx.group_order
    Us = [np.kron(np.eye(m), _random_unitary(rng, d // m)) for d in cx.dims]
    diffs = tuple(Us[q + 1] @ D @ Us[q].conj().T for q, D in enumerate(cx.differentials))
    acts = None
    if cx.actions is not None:
        acts = tuple(tuple(U @ T @ U.conj().T for T in A) for U, A in zip(Us, cx.actions))
    return FiniteGammaComplex(cx.dims, diffs, m, acts)


__all__ = [
    "BlochFamilyRep",
    "BlochGammaOperator",
    "DirichletRecord",
    "EulerRecord",
    "FiniteGammaComplex",
    "FiniteGammaOperator",
    "FiniteGroupRep",
    "GammaCount",
    "RankPerturbationRecord",
    "SandwichRecord",
    "bloch_dolbeault_family",
    "bloch_spectral_projection",
    "change_basis",
    "dirichlet_candidate",
    "dirichlet_lower_bound_check",
    "dolbeault_family",
    "euler_inequalities",
    "finite_dolbeault_family",
    "gamma_counting",
    "gamma_dim",
    "gamma_dim_by_order",
    "laplacian_betti",
    "magnetic_translation_gauge",
    "midpoint_grid",
    "random_equivariant_complex",
    "rank_perturbation_check",
    "sandwich_check",
    "spectral_projection",
    "validate_rep",
    "variational_lower_bound",
]
