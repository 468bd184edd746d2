"""Eigenvalue counting by inertia, low-lying spectra, and the semiclassical comparison.

``count_below`` first tries a sparse ``L D L^H`` factorisation (SuperLU with a
symmetric fill-reducing ordering and diagonal pivots only, so that the diagonal
of ``U`` is ``D``); by Sylvester's law the number of negative eigenvalues of the
shifted matrix is the number of negative entries of ``D``.  If SuperLU leaves the
diagonal or meets a tiny pivot, it falls back to reverse Cuthill-McKee
reordering and the block Schur-complement recursion
``S_i = A_ii - B^H S_{i-1}^{-1} B`` (Haynsworth additivity), with the pivot
blocks diagonalised exactly.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np
import scipy.linalg as la
import scipy.sparse as sp
import scipy.sparse.csgraph as csgraph
import scipy.sparse.linalg as spla

from .errors import FactorizationBreakdown, LambdaOnJump, NoConvergence
from .geomodel import CurvatureField, ModelManifold, field_from_spec, link_phases_from_curvature
from .lattice_op import DirichletU, DirichletUs, LatticeOperator, assemble_dolbeault
from .pointspec import density, jump_margin, site_spectra

SHIFT_RTOL = 1e-8
MAX_RETRIES = 5
PIVOT_RTOL = 1e-13
RESIDUAL_RTOL = 1e-8
KERNEL_RTOL = 1e-6
NOISE_RTOL = 1e-9
GAP_RATIO = 100.0
DENSE_LIMIT = 400


@dataclass(frozen=True)
class SpectralCountResult:
    lam: float
    count: int
    method: str  # "inertia" | "dense"
    certified: bool
    delta: float

    def to_dict(self) -> dict:
        return asdict(self)


def _matrix(H) -> sp.csr_matrix:
    A = H.matrix if isinstance(H, LatticeOperator) else H
    return sp.csr_matrix(A)


def gershgorin(A: sp.spmatrix) -> tuple:
    A = sp.csr_matrix(A)
    d = np.real(A.diagonal())
    rad = np.asarray(abs(A).sum(axis=1)).ravel() - np.abs(d)
    if A.shape[0] == 0:
        return 0.0, 0.0
    return float(np.min(d - rad)), float(np.max(d + rad))


def operator_norm_bound(A: sp.spmatrix) -> float:
    lo, hi = gershgorin(A)
    return max(abs(lo), abs(hi), 1e-300)


# ---------------------------------------------------------------------------
# inertia
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class _BandedLayout:
    perm: np.ndarray
    bounds: list  # block boundaries
    A: sp.csr_matrix  # permuted matrix


def _layout(A: sp.csr_matrix) -> _BandedLayout:
    n = A.shape[0]
    pattern = (abs(A) + abs(A).T).tocsr()
    perm = np.asarray(csgraph.reverse_cuthill_mckee(pattern, symmetric_mode=True))
    P = A[perm][:, perm].tocsr()
    coo = P.tocoo()
    band = int(np.max(np.abs(coo.row - coo.col), initial=0))
    b = max(band, 1)
    bounds = list(range(0, n, b)) + [n]
    return _BandedLayout(perm, bounds, P)


def _ldl_inertia(A: sp.csr_matrix, shift: float, scale: float) -> tuple | None:
    """Inertia from a diagonally pivoted sparse LU, or ``None`` if it is not an ``L D L^H``."""
    M = (A - shift * sp.identity(A.shape[0], dtype=A.dtype, format="csr")).tocsc()
    try:
        lu = spla.splu(M, permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0, options={"SymmetricMode": True})
    except RuntimeError:
        return None
    if not np.array_equal(lu.perm_r, lu.perm_c):
        return None
    d = lu.U.diagonal()
    if np.max(np.abs(np.imag(d)), initial=0.0) > 1e-8 * scale:
        return None
    d = np.real(d)
    if np.min(np.abs(d)) < PIVOT_RTOL * scale or np.max(np.abs(d)) > 1e8 * scale:
        return None
    return int(np.sum(d < 0)), 0, int(np.sum(d > 0))


def inertia(A: sp.spmatrix, shift: float = 0.0, layout: _BandedLayout | None = None, method: str = "auto") -> tuple:
    """``(n_neg, n_zero, n_pos)`` of ``A - shift I``.

    ``method`` is ``"ldl"`` (sparse, may fall back), ``"block"`` (banded Schur
    complements) or ``"auto"`` (sparse for dimensions above 400).  Raises
    ``FactorizationBreakdown`` when a pivot block is numerically singular.
    """
    A = sp.csr_matrix(A)
    n = A.shape[0]
    if n == 0:
        return 0, 0, 0
    if method == "ldl" or (method == "auto" and layout is None and n > DENSE_LIMIT):
        res = _ldl_inertia(A, shift, operator_norm_bound(A) + abs(shift))
        if res is not None:
            return res
    lay = layout or _layout(A)
    P = lay.A
    scale = operator_norm_bound(A) + abs(shift)
    tol = PIVOT_RTOL * scale
    neg = pos = 0
    Sinv = None
    prev = None
    for i in range(len(lay.bounds) - 1):
        a, b = lay.bounds[i], lay.bounds[i + 1]
        S = P[a:b, a:b].toarray() - shift * np.eye(b - a)
        if Sinv is not None:
            B = P[prev[0] : prev[1], a:b].toarray()
            S = S - B.conj().T @ Sinv @ B
        S = (S + S.conj().T) / 2
        w, V = la.eigh(S, check_finite=False)
        if np.min(np.abs(w)) < tol:
            raise FactorizationBreakdown(f"near-singular pivot {np.min(np.abs(w)):.3e} at shift {shift:.12g}")
        neg += int(np.sum(w < 0))
        pos += int(np.sum(w > 0))
        Sinv = (V / w) @ V.conj().T
        prev = (a, b)
    return neg, 0, pos


def dense_count(H, lam: float) -> int:
    """Oracle: number of eigenvalues ``<= lam`` from a dense diagonalisation."""
    A = _matrix(H).toarray()
    if A.shape[0] == 0:
        return 0
    return int(np.sum(np.linalg.eigvalsh(A) <= lam))


def count_below(H, lam: float, delta: float | None = None, max_retries: int = MAX_RETRIES) -> SpectralCountResult:
    """Number of eigenvalues ``<= lam`` by inertia of the shifted operator.

    The count is certified when the counts at ``lam - delta`` and ``lam + delta``
    agree (no spectrum in the bracket).
    """
    A = _matrix(H)
    n = A.shape[0]
    lam = float(lam)
    norm = operator_norm_bound(A)
    delta = SHIFT_RTOL * norm if delta is None else float(delta)
    if n == 0:
        return SpectralCountResult(lam, 0, "inertia", True, delta)
    lo, hi = gershgorin(A)
    if lam < lo - delta:
        return SpectralCountResult(lam, 0, "inertia", True, delta)
    if lam >= hi + delta:
        return SpectralCountResult(lam, n, "inertia", True, delta)
    cache = {}

    def neg(shift: float) -> int:
        if n > DENSE_LIMIT:
            res = _ldl_inertia(A, shift, norm + abs(shift))
            if res is not None:
                return res[0]
        if "lay" not in cache:
            cache["lay"] = _layout(A)
        return inertia(A, shift, cache["lay"], method="block")[0]

    def neg_at(shift: float, direction: float) -> int:
        step = delta
        for _ in range(max_retries + 1):
            try:
                return neg(shift)
            except FactorizationBreakdown:
                shift += direction * step
                step *= 2
        raise FactorizationBreakdown(f"no clean factorization near {shift:.12g} after {max_retries} retries")

    below = neg_at(lam - delta, -1.0)  # eigenvalues < lam - delta
    upper = neg_at(lam + delta, +1.0)  # eigenvalues < lam + delta
    certified = below == upper
    if certified:
        count = upper
    else:
        try:
            count = neg(lam)
        except FactorizationBreakdown:
            count = upper
    return SpectralCountResult(lam, int(count), "inertia", bool(certified), delta)


# ---------------------------------------------------------------------------
# low-lying spectrum
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LowSpectrum:
    values: np.ndarray
    residuals: np.ndarray
    vectors: np.ndarray | None
    kernel_dim: int
    gap_threshold: float
    first_nonzero: float | None
    method: str


def _kernel_stats(values: np.ndarray, norm: float) -> tuple:
    noise = NOISE_RTOL * norm
    nonzero = values[values > noise]
    if nonzero.size == 0:
        return None, None, int(values.size)
    first = float(nonzero[0])
    thr = max(KERNEL_RTOL * first, noise)
    return first, thr, int(np.sum(values <= thr))


def lowest_eigs(H, m: int, vectors: bool = False, sigma: float | None = None) -> LowSpectrum:
    """The ``m`` smallest eigenvalues with residuals and the inferred kernel dimension.

    Small operators are diagonalised densely; larger ones use ARPACK shift-invert
    around ``sigma`` (default slightly below zero) with a deterministic start
    vector, and the result is verified with an inertia count.
    """
    A = _matrix(H)
    n = A.shape[0]
    if m > n or m < 1:
        raise ValueError(f"m={m} outside [1, {n}]")
    norm = operator_norm_bound(A)
    if n <= 1500 or m >= n // 2:
        w, V = la.eigh(A.toarray())
        w, V = w[:m], V[:, :m]
        method = "dense"
    else:
        sig = -1e-3 * norm if sigma is None else float(sigma)
        want = m
        v0 = np.cos(np.arange(n) * 0.7071) + 1j * np.sin(np.arange(n) * 0.3)
        for _ in range(4):
            try:
                w, V = spla.eigsh(A.tocsc(), k=min(want, n - 2), sigma=sig, which="LM", v0=v0, tol=0)
            except spla.ArpackNoConvergence as exc:
                raise NoConvergence(str(exc)) from exc
            order = np.argsort(w.real)
            w, V = w.real[order], V[:, order]
            # nothing strictly below the top computed value may be missing
            cut = float(w[-1]) - 1e-9 * norm
            c = count_below(A, cut, delta=1e-12 * norm).count
            if c == int(np.sum(w <= cut)):
                break
            want = min(n - 2, c + m)
        else:
            raise NoConvergence("shift-invert iteration kept missing eigenvalues")
        w, V = w[:m], V[:, :m]
        method = "lanczos"
    res = np.linalg.norm(A @ V - V * w, axis=0)
    if np.any(res > RESIDUAL_RTOL * norm):
        raise NoConvergence(f"residual {np.max(res):.3e} exceeds {RESIDUAL_RTOL} * |H|")
    first, thr, kdim = _kernel_stats(w, norm)
    return LowSpectrum(w, res, V if vectors else None, kdim, thr if thr is not None else float("nan"), first, method)


def kernel_dimension(H, start: int = 8) -> LowSpectrum:
    """Grow the number of computed eigenvalues until the first non-zero one appears."""
    A = _matrix(H)
    n = A.shape[0]
    m = min(start, n)
    while True:
        low = lowest_eigs(A, m)
        if low.first_nonzero is not None or m == n:
            if low.kernel_dim < m or m == n:
                return low
        m = min(n, 2 * m)


def harmonic_cluster(H, expected: float = 0.0, gap_ratio: float = GAP_RATIO) -> LowSpectrum:
    """Low-lying cluster separated from the rest of the spectrum by a dominant gap.

    On coarse grids a degenerate Landau level splits into a narrow band, so the
    discrete harmonic space is the bottom cluster rather than the exact kernel.
    The window of computed eigenvalues starts at ``2 * expected + 8`` and is
    doubled until a gap qualifies; a gap qualifies when the upper value exceeds
    ``gap_ratio`` times the lower one (floored at the noise level), and among
    qualifying gaps the one with the largest absolute jump wins.
    ``kernel_dim`` is the cluster size, ``gap_threshold`` its top (floored) and
    ``first_nonzero`` the first value above the gap.
    """
    A = _matrix(H)
    n = A.shape[0]
    norm = operator_norm_bound(A)
    noise = NOISE_RTOL * norm
    m = min(n, max(8, int(math.ceil(2 * expected)) + 8))
    while True:
        low = lowest_eigs(A, m)
        w = np.concatenate([[noise], np.maximum(low.values, noise)])
        ratio = w[1:] / w[:-1]
        jump = w[1:] - w[:-1]
        ok = np.flatnonzero(ratio >= gap_ratio)
        if ok.size:
            i = int(ok[np.argmax(jump[ok])])  # cluster is values[:i]
            if i < m - 1 or m == n:
                top = float(w[i])
                return LowSpectrum(low.values, low.residuals, None, i, max(top, KERNEL_RTOL * float(w[i + 1])), float(w[i + 1]), low.method)
        if m == n:
            return LowSpectrum(low.values, low.residuals, None, n, float(low.values[-1]), None, low.method)
        m = min(n, 2 * m)


# ---------------------------------------------------------------------------
# semiclassical comparison
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class WeylRow:
    k: int
    resolution: int
    measured: float
    predicted: float
    rel_error: float
    count: int
    certified: bool


def predicted_density(model: ModelManifold, field: CurvatureField, q: int, lam: float, bar: bool = False) -> float:
    """``r sum_{|J|=q} int_U nu_B(2 lam + alpha_C(J) - alpha_J)`` over one fundamental domain."""
    alphas, _, _ = site_spectra(field.values[model.fundamental])
    uniq, counts = np.unique(np.round(alphas, 12), axis=0, return_counts=True)
    total = sum(c * density(a, q, lam, bar=bar) for a, c in zip(uniq, counts))
    return float(field.twist_rank * total * model.cell_volume)


def check_off_jumps(model: ModelManifold, field: CurvatureField, q: int, lam: float, margin: float = 1e-9) -> float:
    alphas, _, _ = site_spectra(field.values[model.fundamental])
    uniq = np.unique(np.round(alphas, 12), axis=0)
    gap = min(jump_margin(a, q, lam) for a in uniq)
    if gap <= margin * max(1.0, abs(lam)):
        raise LambdaOnJump(f"lambda={lam} lies on a level sum of the density (margin {gap:.3e})")
    return gap


def sqrt_resolution_schedule(k0: int, R0: int) -> Callable[[int], int]:
    """``R(k) = R0 * sqrt(k / k0)`` rounded to an even integer (keeps ``k h^2`` fixed)."""

    def schedule(k: int) -> int:
        return max(4, 2 * int(round(R0 * math.sqrt(k / k0) / 2)))

    return schedule


def weyl_limit_compare(
    model: ModelManifold,
    field_spec: dict,
    q: int,
    lam: float,
    k_list: Sequence[int],
    resolution: Callable[[int], int] | None = None,
    domain: str = "U",
    s: float | None = None,
    twist_rank: int = 1,
    method: str = "weitzenbock",
) -> list:
    """Rows ``(k, R, k^-n N(lam, (1/k) Delta''|Omega), predicted, relative error)``.

    ``field_spec`` is rebuilt on every resolution of the schedule.
    """
    rows = []
    n = model.complex_dim
    for k in k_list:
        R = model.resolution if resolution is None else int(resolution(k))
        mk = model.with_resolution(R)
        f = field_from_spec(mk, field_spec, twist_rank)
        pred = predicted_density(mk, f, q, lam)
        if q < 0 or q > n:
            rows.append(WeylRow(int(k), R, 0.0, 0.0, 0.0, 0, True))
            continue
        check_off_jumps(mk, f, q, lam)
        links = link_phases_from_curvature(mk, f, k)
        bc = DirichletU() if domain == "U" else DirichletUs(s)
        H = assemble_dolbeault(mk, links, q, bc, twist_rank, method)
        res = count_below(H, lam)
        meas = res.count / float(k) ** n
        err = abs(meas - pred) / pred if pred > 0 else abs(meas)
        rows.append(WeylRow(int(k), R, meas, pred, err, res.count, res.certified))
    return rows


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------

COUNT_COLUMNS = ("k", "q", "lambda", "bc", "count", "certified", "method")


def fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return "%.12g" % float(x)
    return str(x)


def write_counts_csv(rows: Sequence[dict], path) -> None:
    """Columns ``k, q, lambda, bc, theta_0..theta_{d-1}, count, certified, method``."""
    d = max((len(r.get("theta", ())) for r in rows), default=0)
    header = ["k", "q", "lambda", "bc"] + [f"theta_{i}" for i in range(d)] + ["count", "certified", "method"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            th = list(r.get("theta", ()))
            th = [fmt(float(t)) for t in th] + [""] * (d - len(th))
            w.writerow([fmt(r["k"]), fmt(r["q"]), fmt(r["lambda"]), r["bc"]] + th + [fmt(r["count"]), fmt(r["certified"]), r["method"]])


__all__ = [
    "LowSpectrum",
    "SpectralCountResult",
    "WeylRow",
    "check_off_jumps",
    "count_below",
    "dense_count",
    "gershgorin",
    "inertia",
    "harmonic_cluster",
    "kernel_dimension",
    "lowest_eigs",
    "predicted_density",
    "sqrt_resolution_schedule",
    "weyl_limit_compare",
    "write_counts_csv",
]
