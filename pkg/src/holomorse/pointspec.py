"""Pointwise curvature spectra, Morse strata and the Landau-level density nu_B."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DegeneratePoint, NotHermitian, TruncationInsufficient
from .geomodel import CurvatureField, ModelManifold

EPS_DEGENERATE = 1e-9
LEVEL_RTOL = 1e-12  # level sums within this relative distance of lambda count as "at" lambda
HERMITIAN_TOL = 1e-10


@dataclass(frozen=True)
class PointSpectrum:
    alphas: tuple  # ascending
    signature_q: int
    degenerate: bool

    @property
    def n(self) -> int:
        return len(self.alphas)


@dataclass(frozen=True)
class NuBParams:
    real_dim_N: int
    field_magnitudes: tuple  # B_1 >= ... >= B_s > 0
    truncation_P: int | None = None

    def __post_init__(self):
        if self.real_dim_N < 1 or self.real_dim_N % 2:
            raise ValueError("real dimension must be a positive even integer")
        B = tuple(sorted((float(b) for b in self.field_magnitudes), reverse=True))
        if any(b <= 0 for b in B):
            raise ValueError("field magnitudes must be strictly positive")
        if 2 * len(B) > self.real_dim_N:
            raise ValueError("at most N/2 nonzero field magnitudes")
        object.__setattr__(self, "field_magnitudes", B)

    @property
    def s(self) -> int:
        return len(self.field_magnitudes)

    @property
    def exponent(self) -> int:
        return self.real_dim_N // 2 - self.s

    @property
    def prefactor(self) -> float:
        N, s = self.real_dim_N, self.s
        return 2.0 ** (s - N) * math.pi ** (-N / 2) / math.gamma(N / 2 - s + 1) * math.prod(self.field_magnitudes)


def _scale(alphas: np.ndarray) -> float:
    return float(np.max(np.abs(alphas), initial=0.0))


def curvature_eigenvalues(matrix, eps: float = EPS_DEGENERATE) -> PointSpectrum:
    """Sorted eigenvalues, signature and degeneracy flag of a Hermitian matrix.

    Degeneracy is relative: ``|alpha_j| < eps * max |alpha|`` (an all-zero
    matrix is degenerate).
    """
    A = np.asarray(matrix, dtype=complex)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise NotHermitian("curvature must be a square matrix")
    defect = float(np.max(np.abs(A - A.conj().T), initial=0.0))
    if defect > HERMITIAN_TOL * max(1.0, float(np.max(np.abs(A), initial=0.0))):
        raise NotHermitian(f"matrix is not Hermitian (defect {defect:.3e})")
    alphas = np.linalg.eigvalsh((A + A.conj().T) / 2)
    return _spectrum_from_alphas(alphas, eps)


def _spectrum_from_alphas(alphas: np.ndarray, eps: float) -> PointSpectrum:
    alphas = np.sort(np.asarray(alphas, dtype=float))
    scale = _scale(alphas)
    tol = eps * scale
    degenerate = scale == 0.0 or bool(np.any(np.abs(alphas) < tol))
    q = int(np.sum(alphas < -tol))
    return PointSpectrum(tuple(float(a) for a in alphas), q, degenerate)


def site_spectra(values: np.ndarray, eps: float = EPS_DEGENERATE) -> tuple:
    """Vectorised eigenvalues ``(n_sites, n)``, signatures and degeneracy flags."""
    alphas = np.linalg.eigvalsh(values)
    scale = np.max(np.abs(alphas), axis=1)
    tol = eps * scale
    degenerate = (scale == 0.0) | np.any(np.abs(alphas) < tol[:, None], axis=1)
    sig = np.sum(alphas < -tol[:, None], axis=1)
    return alphas, sig, degenerate


@dataclass(frozen=True)
class Stratification:
    volumes: dict  # q -> volume of X(q)
    degenerate_volume: float
    signature: np.ndarray  # per fundamental-domain site; -1 marks degenerate cells


def stratify(field: CurvatureField, model: ModelManifold, eps: float = EPS_DEGENERATE) -> Stratification:
    """Volumes of the open strata ``X(q)`` summed over one fundamental domain."""
    vals = field.values[model.fundamental]
    _, sig, deg = site_spectra(vals, eps)
    sig = np.where(deg, -1, sig)
    vol = model.cell_volume
    volumes = {q: float(np.sum(sig == q) * vol) for q in range(model.complex_dim + 1)}
    return Stratification(volumes, float(np.sum(deg) * vol), sig)


# ---------------------------------------------------------------------------
# nu_B
# ---------------------------------------------------------------------------


def _auto_truncation(lam: float, B: Sequence[float]) -> int:
    if not B:
        return 0
    return max(0, int(math.floor((lam - sum(B)) / (2 * min(B)))) + 1)


def landau_levels(B: Sequence[float], lam: float, P: int | None = None) -> np.ndarray:
    """All level sums ``sum_j (2 p_j + 1) B_j <= lam`` with ``p_j <= P``."""
    levels = np.zeros(1)
    cut = lam + LEVEL_RTOL * max(abs(lam), sum(B))
    for b in B:
        top = _auto_truncation(cut, [b]) if P is None else P
        steps = (2 * np.arange(top + 1) + 1) * b
        levels = (levels[:, None] + steps[None, :]).ravel()
        levels = levels[levels <= cut]
        if levels.size == 0:
            break
    return np.sort(levels)


def _nu(lam: float, params: NuBParams, bar: bool) -> float:
    lam = float(lam)
    if lam <= 0.0:
        # every level sum is positive and the free term vanishes at 0
        return 0.0
    B = params.field_magnitudes
    P = params.truncation_P
    if P is not None and B:
        omitted = sum(B) + 2 * (P + 1) * min(B)
        if omitted <= lam:
            raise TruncationInsufficient(f"truncation P={P} omits a level at {omitted:.6g} <= lambda={lam:.6g}")
    levels = landau_levels(B, lam, P)
    e = params.exponent
    diff = lam - levels
    tol = LEVEL_RTOL * max(lam, sum(B))
    if e == 0:
        total = np.sum(diff >= -tol) if bar else np.sum(diff > tol)
    else:
        total = np.sum(np.clip(diff, 0.0, None) ** e)
    return float(params.prefactor * total)


def nu_b(lam: float, params: NuBParams) -> float:
    """Semiclassical integrated density of states for constant field magnitudes."""
    return _nu(lam, params, bar=False)


def nu_b_bar(lam: float, params: NuBParams) -> float:
    """Right limit of :func:`nu_b` (levels exactly at ``lam`` are counted)."""
    return _nu(lam, params, bar=True)


def weyl_density(lam: float, N: int) -> float:
    """``(2 pi)^-N vol{|xi|^2 <= lam}`` in ``R^N``."""
    if lam <= 0:
        return 0.0
    return (2 * math.pi) ** (-N) * math.pi ** (N / 2) * lam ** (N / 2) / math.gamma(N / 2 + 1)


# ---------------------------------------------------------------------------
# pointwise Morse densities
# ---------------------------------------------------------------------------


def _subsets(n: int, q: int):
    return itertools.combinations(range(n), q)


def density(alphas: Sequence[float], q: int, lam: float, bar: bool = False, eps: float = EPS_DEGENERATE) -> float:
    """``sum_{|J|=q} nu_B(2 lam + alpha_C(J) - alpha_J)`` allowing degenerate alphas.

    ``B`` consists of the magnitudes of the non-negligible alphas and ``N = 2n``.
    """
    alphas = np.asarray(alphas, dtype=float)
    n = alphas.size
    if q < 0 or q > n:
        return 0.0
    scale = _scale(alphas)
    B = tuple(abs(a) for a in alphas if scale > 0 and abs(a) >= eps * scale)
    params = NuBParams(2 * n, B)
    f = nu_b_bar if bar else nu_b
    total = 0.0
    full = float(np.sum(alphas))
    for J in _subsets(n, q):
        aJ = float(np.sum(alphas[list(J)]))
        total += f(2 * lam + (full - aJ) - aJ, params)
    return total


def pointwise_density(alpha: PointSpectrum, q: int, lam: float, bar: bool = False) -> float:
    """Integrand of the Dolbeault counting limit per unit twist rank."""
    if alpha.degenerate:
        raise DegeneratePoint("pointwise density needs a non-degenerate curvature spectrum")
    return density(alpha.alphas, q, lam, bar=bar)


def pointwise_morse_limit(alpha: PointSpectrum, q: int) -> float:
    """``(2 pi)^-n |alpha_1 ... alpha_n|`` on the stratum of signature ``q``, else 0."""
    if alpha.degenerate:
        raise DegeneratePoint("Morse density is undefined on degenerate points")
    if alpha.signature_q != q:
        return 0.0
    return abs(math.prod(alpha.alphas)) / (2 * math.pi) ** alpha.n


def jump_margin(alphas: Sequence[float], q: int, lam: float, eps: float = EPS_DEGENERATE) -> float:
    """Distance from ``lam`` to the nearest jump of ``lam -> density(alphas, q, lam)``.

    Jumps only occur when every alpha is non-zero (step-function case); the
    margin is ``inf`` otherwise.
    """
    alphas = np.asarray(alphas, dtype=float)
    n = alphas.size
    scale = _scale(alphas)
    if scale == 0.0 or np.any(np.abs(alphas) < eps * scale):
        return math.inf
    B = np.abs(alphas)
    full = float(np.sum(alphas))
    best = math.inf
    for J in _subsets(n, q):
        aJ = float(np.sum(alphas[list(J)]))
        shift = (full - aJ) - aJ
        # jumps where 2 lam + shift equals a level sum
        top = 2 * (abs(lam) + 1.0) + abs(shift) + 2 * float(np.max(B))
        levels = landau_levels(tuple(B), top)
        if levels.size:
            best = min(best, float(np.min(np.abs(lam - (levels - shift) / 2))))
    return best


__all__ = [
    "NuBParams",
    "PointSpectrum",
    "Stratification",
    "curvature_eigenvalues",
    "density",
    "jump_margin",
    "landau_levels",
    "nu_b",
    "nu_b_bar",
    "pointwise_density",
    "pointwise_morse_limit",
    "site_spectra",
    "stratify",
    "weyl_density",
]
