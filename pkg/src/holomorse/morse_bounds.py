"""Morse integrals and the weak / strong / Riemann-Roch bound families."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .geomodel import CurvatureField, ModelManifold
from .pointspec import EPS_DEGENERATE, site_spectra

VOLUME_NORMALIZATION = (
    "flat Riemannian dV; (i/2pi c)^n / n! integrates as prod_j(alpha_j / 2pi) dV in an orthonormal frame"
)
SLACK_RTOL = 1e-9


@dataclass(frozen=True)
class MorseReport:
    integrals_I: tuple
    weak_bounds: tuple
    strong_bounds: tuple
    rr_value: float
    twist_rank: int
    degenerate_volume: float = 0.0
    volume_normalization: str = VOLUME_NORMALIZATION

    @property
    def n(self) -> int:
        return len(self.integrals_I) - 1

    def to_dict(self) -> dict:
        return asdict(self)


def _site_products(field: CurvatureField, model: ModelManifold, eps: float):
    alphas, sig, deg = site_spectra(field.values[model.fundamental], eps)
    return np.prod(alphas, axis=1), sig, deg


def morse_integral(field: CurvatureField, model: ModelManifold, q: int, eps: float = EPS_DEGENERATE) -> float:
    """``r * sum_{cells of signature q} (2 pi)^-n |prod alpha| dV`` over one fundamental domain."""
    n = model.complex_dim
    if not 0 <= q <= n:
        raise ValueError(f"q={q} outside [0, {n}]")
    prods, sig, deg = _site_products(field, model, eps)
    mask = (sig == q) & ~deg
    return float(field.twist_rank * np.sum(np.abs(prods[mask])) * model.cell_volume / (2 * math.pi) ** n)


def signed_curvature_integral(field: CurvatureField, model: ModelManifold) -> float:
    """``r (2 pi)^-n int prod_j alpha_j dV`` without stratification."""
    prods, _, _ = _site_products(field, model, EPS_DEGENERATE)
    n = model.complex_dim
    return float(field.twist_rank * np.sum(prods) * model.cell_volume / (2 * math.pi) ** n)


def theorem_bounds(integrals: Sequence[float], twist_rank: int = 1, degenerate_volume: float = 0.0) -> MorseReport:
    """Assemble the three bound families from ``I^0 .. I^n``."""
    I = tuple(float(v) for v in integrals)
    n = len(I) - 1
    strong = tuple(sum((-1) ** (q - j) * I[j] for j in range(q + 1)) for q in range(n + 1))
    rr = sum((-1) ** j * I[j] for j in range(n + 1))
    return MorseReport(I, I, strong, float(rr), int(twist_rank), float(degenerate_volume))


def morse_report(field: CurvatureField, model: ModelManifold, eps: float = EPS_DEGENERATE) -> MorseReport:
    I = [morse_integral(field, model, q, eps) for q in range(model.complex_dim + 1)]
    _, _, deg = _site_products(field, model, eps)
    return theorem_bounds(I, field.twist_rank, float(np.sum(deg) * model.cell_volume))


@dataclass(frozen=True)
class InequalityVerdict:
    k: int
    measured: tuple
    weak_slack: tuple
    weak_holds: tuple
    strong_slack: tuple
    strong_holds: tuple
    rr_residual: float

    @property
    def all_hold(self) -> bool:
        return all(self.weak_holds) and all(self.strong_holds)

    def to_dict(self) -> dict:
        return asdict(self)


def _holds(slack: float, scale: float) -> bool:
    return slack >= -SLACK_RTOL * max(1.0, abs(scale))


def check_inequalities(measured: Sequence[float], report: MorseReport, k: int) -> InequalityVerdict:
    """Compare measured Gamma-dimensions ``h_q`` at power ``k`` with ``k^n`` times the bounds.

    Negative slack is reported as a failed inequality; nothing is raised.
    """
    h = [float(v) for v in measured]
    n = report.n
    if len(h) != n + 1:
        raise ValueError(f"need {n + 1} measured dimensions")
    if any(not math.isfinite(v) or v < 0 for v in h):
        raise ValueError("measured dimensions must be finite and non-negative")
    kn = float(k) ** n
    weak_slack, weak_ok, strong_slack, strong_ok = [], [], [], []
    for q in range(n + 1):
        bound = kn * report.weak_bounds[q]
        s = bound - h[q]
        weak_slack.append(s)
        weak_ok.append(_holds(s, bound))
        alt = sum((-1) ** (q - j) * h[j] for j in range(q + 1))
        bound = kn * report.strong_bounds[q]
        s = bound - alt
        strong_slack.append(s)
        strong_ok.append(_holds(s, bound))
    euler = sum((-1) ** j * h[j] for j in range(n + 1))
    residual = abs(euler - kn * report.rr_value) / kn
    return InequalityVerdict(
        int(k), tuple(h), tuple(weak_slack), tuple(weak_ok), tuple(strong_slack), tuple(strong_ok), float(residual)
    )


__all__ = [
    "InequalityVerdict",
    "MorseReport",
    "check_inequalities",
    "morse_integral",
    "morse_report",
    "signed_curvature_integral",
    "theorem_bounds",
]
