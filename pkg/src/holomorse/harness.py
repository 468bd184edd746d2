"""Experiment harness: configuration, k-sweeps, report emission and the CLI."""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path
from typing import Sequence

import click
import jsonschema
import numpy as np
import yaml

from .errors import ConfigError, HolomorseError, InsufficientSeries
from .gamma_dim import BlochGammaOperator, FiniteGammaOperator, dolbeault_family, gamma_counting, midpoint_grid, sandwich_check
from .geomodel import build_torus_model, field_from_spec, link_phases_from_curvature
from .morse_bounds import SLACK_RTOL, MorseReport, check_inequalities, morse_report
from .pointspec import jump_margin, site_spectra
from .spectral_count import fmt, harmonic_cluster, sqrt_resolution_schedule, weyl_limit_compare, write_counts_csv

__all__ = [
    "CONVERGENCE_COLUMNS",
    "SANDWICH_COLUMNS",
    "ExperimentConfig",
    "KernelRecord",
    "RunReport",
    "check_report_dir",
    "cli",
    "convergence_table",
    "load_config",
    "run_experiment",
    "write_convergence_csv",
]

CONVERGENCE_COLUMNS = ("k", "q", "measured_over_kn", "bound_coeff", "slack_over_kn")
SANDWICH_COLUMNS = (
    "k", "q", "lambda", "lower", "n_gamma", "upper", "C_used", "C_measured", "s",
    "lower_holds", "upper_holds", "certified",
)
WEYL_COLUMNS = ("k", "resolution", "measured", "predicted", "rel_error", "count", "certified")
LAMBDA_MARGIN_MIN = 1e-9


def _version() -> str:
    try:
        from importlib.metadata import version

        return version("holomorse")
    except Exception:  # pragma: no cover - not installed
        return "0+unknown"


def load_schema() -> dict:
    return json.loads(resources.files("holomorse").joinpath("data/experiment.schema.json").read_text())


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ExperimentConfig:
    experiment_name: str
    model: dict
    curvature: dict
    k_list: tuple
    q_list: tuple
    twist_rank: int = 1
    method: str = "weitzenbock"
    lambda_list: tuple = ()
    boundary: dict = field(default_factory=lambda: {"schedule": "k^-1/4"})
    sandwich: dict = field(default_factory=lambda: {"enabled": False})
    weyl: dict = field(default_factory=lambda: {"enabled": False})
    theta_points: int = 64
    output_dir: str = "out"
    seed: int = 0
    workers: int = 1

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        try:
            jsonschema.validate(raw, load_schema())
        except jsonschema.ValidationError as exc:
            raise ConfigError(f"invalid config: {exc.message} at {list(exc.absolute_path)}") from exc
        d = copy.deepcopy(raw)
        for key in ("k_list", "q_list", "lambda_list"):
            if key in d:
                d[key] = tuple(d[key])
        cfg = cls(**d)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        ks = list(self.k_list)
        if any(b <= a for a, b in zip(ks, ks[1:])):
            raise ConfigError("k_list must be strictly increasing")
        n = int(self.model["n"])
        if any(not 0 <= q <= n for q in self.q_list):
            raise ConfigError(f"q_list must lie in [0, {n}]")
        if self.boundary.get("schedule") == "fixed" and "s" not in self.boundary:
            raise ConfigError("fixed boundary schedule needs s")

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("k_list", "q_list", "lambda_list"):
            d[key] = list(d[key])
        return d

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def load_config(path) -> ExperimentConfig:
    with open(path) as fh:
        raw = yaml.safe_load(fh)
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: expected a mapping at top level")
    return ExperimentConfig.from_dict(raw)


def _build(cfg: ExperimentConfig, resolution: int | None = None):
    m = cfg.model
    cover = m.get("cover")
    if cover is not None and cover.get("kind") == "trivial":
        cover = None
    model = build_torus_model(int(m["n"]), m.get("lattice"), int(resolution or m["resolution"]), cover)
    return model, field_from_spec(model, cfg.curvature, cfg.twist_rank)


def lambda_margins(model, fld, q_list: Sequence[int], lambdas: Sequence[float]) -> list:
    """Distance of each ``(q, lambda)`` from the jump set of the predicted density."""
    alphas, _, _ = site_spectra(fld.values[model.fundamental])
    uniq = np.unique(np.round(alphas, 12), axis=0)
    out = []
    for q in q_list:
        for lam in lambdas:
            gap = min(jump_margin(a, q, lam) for a in uniq)
            if gap <= LAMBDA_MARGIN_MIN * max(1.0, abs(lam)):
                raise ConfigError(f"lambda={lam} lies on a level sum of the q={q} density")
            out.append({"q": int(q), "lambda": float(lam), "margin": None if math.isinf(gap) else float(gap)})
    return out


# ---------------------------------------------------------------------------
# kernel measurement
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class KernelRecord:
    k: int
    q: int
    tau: float
    value: float  # Gamma-dimension of the harmonic space
    certified: bool
    method: str
    rows: tuple  # counts.csv rows

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("rows")
        return d


def _annotate(exc: Exception, where: str) -> Exception:
    msg = f"[{where}] {exc}"
    try:
        new = type(exc)(msg)
    except TypeError:
        new = HolomorseError(msg)
    new.__cause__ = exc
    return new


def _mid_gap(low) -> float:
    """Geometric mean of the kernel threshold and the first non-zero eigenvalue."""
    if low.first_nonzero is None:
        return float(low.values[-1]) + 1.0
    return math.sqrt(low.gap_threshold * low.first_nonzero)


def _bloch_tau(fam: BlochGammaOperator, expected: float) -> float:
    thetas, _ = midpoint_grid(2, fam.d)
    tops, firsts = [], []
    for th in [np.zeros(fam.d)] + list(thetas):
        low = harmonic_cluster(fam.fiber(tuple(th)), expected)
        if low.first_nonzero is None:
            return float("inf")
        firsts.append(low.first_nonzero)
        tops.append(low.gap_threshold)
    return math.sqrt(max(tops) * min(firsts))


def measure_kernel(model, fld, k: int, q: int, cfg: ExperimentConfig, morse: MorseReport | None = None) -> KernelRecord:
    """Gamma-dimension of the discrete harmonic space of ``(1/k) Delta''_{k,q}``."""
    links = link_phases_from_curvature(model, fld, k)
    fam = dolbeault_family(model, links, q, cfg.twist_rank, cfg.method)
    per_domain = 0.0 if morse is None else float(k) ** model.complex_dim * morse.integrals_I[q]
    if isinstance(fam, FiniteGammaOperator):
        low = harmonic_cluster(fam.matrix, per_domain * fam.order)
        tau = _mid_gap(low)
        g = gamma_counting(fam, tau, projector_check=False)
        count = int(round(g.value * fam.order))
        rows = ({"k": k, "q": q, "lambda": tau, "bc": "periodic", "count": count, "certified": g.certified, "method": "inertia"},)
        return KernelRecord(k, q, tau, g.value, g.certified, "finite", rows)
    tau = _bloch_tau(fam, per_domain)
    if math.isinf(tau):
        tau = 1.0
    g = gamma_counting(fam, tau, theta_points=cfg.theta_points, workers=1)
    rows = tuple(
        {"k": k, "q": q, "lambda": tau, "bc": "bloch", "theta": th, "count": c, "certified": g.certified, "method": "eigvalsh"}
        for th, c in g.trace
    )
    return KernelRecord(k, q, tau, g.value, g.certified, "bloch", rows)


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------


@dataclass
class RunReport:
    config: dict
    morse: MorseReport
    kernels: list  # KernelRecord
    verdicts: list  # InequalityVerdict
    sandwich: list  # SandwichRecord
    weyl: list  # WeylRow
    lambda_margins: list
    provenance: dict

    @property
    def n(self) -> int:
        return self.morse.n

    def measured(self) -> dict:
        return {(r.k, r.q): r.value for r in self.kernels}

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "morse": self.morse.to_dict(),
            "measured": [r.to_dict() for r in self.kernels],
            "verdicts": [v.to_dict() | {"all_hold": v.all_hold} for v in self.verdicts],
            "sandwich": [s.to_dict() | {"holds": s.holds} for s in self.sandwich],
            "weyl": [asdict(w) for w in self.weyl],
            "lambda_margins": self.lambda_margins,
            "provenance": self.provenance,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunReport":
        m = d["morse"]
        morse = MorseReport(
            tuple(m["integrals_I"]), tuple(m["weak_bounds"]), tuple(m["strong_bounds"]), m["rr_value"],
            m["twist_rank"], m["degenerate_volume"], m["volume_normalization"],
        )
        kern = [KernelRecord(r["k"], r["q"], r["tau"], r["value"], r["certified"], r["method"], ()) for r in d["measured"]]
        return cls(d["config"], morse, kern, [], [], [], d.get("lambda_margins", []), d.get("provenance", {}))


def convergence_table(reports) -> list:
    """Rows ``(k, q, k^-n h_q, I^q, I^q - k^-n h_q)`` sorted by ``(q, k)``."""
    if isinstance(reports, RunReport):
        reports = [reports]
    reports = list(reports)
    if not reports:
        raise InsufficientSeries("no reports")
    morse = reports[0].morse
    n = morse.n
    measured = {}
    for rep in reports:
        measured.update(rep.measured())
    ks = sorted({k for k, _ in measured})
    if len(ks) < 2:
        raise InsufficientSeries(f"need at least 2 k values, got {ks}")
    rows = []
    for (k, q) in sorted(measured, key=lambda kq: (kq[1], kq[0])):
        m = measured[(k, q)] / float(k) ** n
        b = morse.weak_bounds[q]
        rows.append({"k": k, "q": q, "measured_over_kn": m, "bound_coeff": b, "slack_over_kn": b - m})
    return rows


def _write_rows(path: Path, columns: Sequence[str], rows: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([fmt(r[c]) for c in columns])


def write_convergence_csv(rows: Sequence[dict], path) -> None:
    _write_rows(Path(path), CONVERGENCE_COLUMNS, rows)


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, (np.bool_,)):
        return bool(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o).__name__)


def _sanitize(o):
    if isinstance(o, float) and not math.isfinite(o):
        return None
    if isinstance(o, dict):
        return {k: _sanitize(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_sanitize(v) for v in o]
    return o


def write_report(report: RunReport, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "report.json", "w") as fh:
        json.dump(_sanitize(json.loads(json.dumps(report.to_dict(), default=_json_default))), fh, indent=2, sort_keys=True)
        fh.write("\n")
    rows = [row for rec in report.kernels for row in rec.rows]
    write_counts_csv(rows, out / "counts.csv")
    try:
        conv = convergence_table(report)
    except InsufficientSeries:
        conv = []
    write_convergence_csv(conv, out / "convergence.csv")
    _write_rows(out / "sandwich.csv", SANDWICH_COLUMNS, [s.to_dict() | {"lambda": s.lam} for s in report.sandwich])
    if report.weyl:
        _write_rows(out / "weyl.csv", WEYL_COLUMNS, [asdict(w) for w in report.weyl])
    return out


# ---------------------------------------------------------------------------
# orchestration
# ---------------------------------------------------------------------------


def _pool_map(fn, items, workers: int) -> list:
    if workers <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def run_experiment(cfg: ExperimentConfig, out_dir=None, workers: int | None = None, write: bool = True) -> RunReport:
    """Run every configured measurement and (optionally) write the report files."""
    t0 = time.perf_counter()
    workers = cfg.workers if workers is None else int(workers)
    model, fld = _build(cfg)
    n = model.complex_dim
    morse = morse_report(fld, model)
    margins = lambda_margins(model, fld, cfg.q_list, cfg.lambda_list)
    timing = {}

    # kernel dimensions; verdicts need every q, so measure all of 0..n
    q_all = sorted(set(range(n + 1)))
    items = [(k, q) for k in cfg.k_list for q in q_all]

    def kernel_item(kq):
        k, q = kq
        try:
            return measure_kernel(model, fld, k, q, cfg, morse)
        except HolomorseError as exc:
            raise _annotate(exc, f"k={k}, q={q}") from exc

    t = time.perf_counter()
    kernels = _pool_map(kernel_item, items, workers)
    timing["kernels_s"] = time.perf_counter() - t
    by_kq = {(r.k, r.q): r.value for r in kernels}
    verdicts = [check_inequalities([by_kq[(k, q)] for q in q_all], morse, k) for k in cfg.k_list]

    sandwich = []
    sw = cfg.sandwich or {}
    if sw.get("enabled") and cfg.lambda_list:
        ks = sw.get("k_list", list(cfg.k_list))
        sitems = [(k, q, lam) for k in ks for q in cfg.q_list for lam in cfg.lambda_list]
        fixed_s = cfg.boundary.get("s") if cfg.boundary.get("schedule") == "fixed" else None

        def sandwich_item(it):
            k, q, lam = it
            try:
                return sandwich_check(
                    model, fld, k, q, lam, cfg.twist_rank, cfg.method, s=fixed_s,
                    theta_points=int(sw.get("theta_points", cfg.theta_points)),
                )
            except HolomorseError as exc:
                raise _annotate(exc, f"k={k}, q={q}, lambda={lam}") from exc

        t = time.perf_counter()
        sandwich = _pool_map(sandwich_item, sitems, workers)
        timing["sandwich_s"] = time.perf_counter() - t

    weyl = []
    wc = cfg.weyl or {}
    if wc.get("enabled"):
        ks = wc.get("k_list", list(cfg.k_list))
        sched = None
        if wc.get("resolution_schedule") == "sqrt_k":
            sched = sqrt_resolution_schedule(ks[0], int(cfg.model["resolution"]))
        t = time.perf_counter()
        try:
            weyl = weyl_limit_compare(
                model, cfg.curvature, int(wc.get("q", 0)), float(wc["lambda"]), ks, sched,
                twist_rank=cfg.twist_rank, method=cfg.method,
            )
        except HolomorseError as exc:
            raise _annotate(exc, f"weyl q={wc.get('q', 0)}, lambda={wc['lambda']}") from exc
        timing["weyl_s"] = time.perf_counter() - t

    timing["total_s"] = time.perf_counter() - t0
    prov = {"config_hash": cfg.config_hash(), "version": _version(), "seed": cfg.seed, "workers": workers, "timing": timing}
    report = RunReport(cfg.to_dict(), morse, kernels, verdicts, sandwich, weyl, margins, prov)
    if write:
        write_report(report, out_dir if out_dir is not None else cfg.output_dir)
    return report


# ---------------------------------------------------------------------------
# re-verification from CSV
# ---------------------------------------------------------------------------


def _read_csv(path: Path) -> list:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _holds(slack: float, scale: float) -> bool:
    return slack >= -SLACK_RTOL * max(1.0, abs(scale))


def check_report_dir(report_dir) -> list:
    """Recompute every verdict from the CSV columns; return a list of mismatch strings."""
    d = Path(report_dir)
    rep = json.loads((d / "report.json").read_text())
    n = len(rep["morse"]["integrals_I"]) - 1
    strong = rep["morse"]["strong_bounds"]
    conv = _read_csv(d / "convergence.csv")
    problems = []
    per_k = {}
    for row in conv:
        k, q = int(row["k"]), int(row["q"])
        per_k.setdefault(k, {})[q] = row
    for v in rep["verdicts"]:
        k = int(v["k"])
        rows = per_k.get(k)
        if rows is None:
            problems.append(f"k={k}: missing from convergence.csv")
            continue
        kn = float(k) ** n
        meas = [float(rows[q]["measured_over_kn"]) for q in range(n + 1)]
        for q in range(n + 1):
            slack = float(rows[q]["slack_over_kn"]) * kn
            weak = _holds(slack, float(rows[q]["bound_coeff"]) * kn)
            if weak != bool(v["weak_holds"][q]):
                problems.append(f"k={k}, q={q}: weak verdict {v['weak_holds'][q]} but CSV slack {slack:.3e}")
            alt = sum((-1) ** (q - j) * meas[j] for j in range(q + 1)) * kn
            s_strong = strong[q] * kn - alt
            if _holds(s_strong, strong[q] * kn) != bool(v["strong_holds"][q]):
                problems.append(f"k={k}, q={q}: strong verdict {v['strong_holds'][q]} but CSV slack {s_strong:.3e}")
    sw = _read_csv(d / "sandwich.csv")
    if len(sw) != len(rep["sandwich"]):
        problems.append("sandwich.csv and report.json disagree on the number of records")
    for row, rec in zip(sw, rep["sandwich"]):
        lo, g, up = float(row["lower"]), float(row["n_gamma"]), float(row["upper"])
        if (lo <= g + 1e-12) != bool(rec["lower_holds"]) or (g <= up + 1e-12) != bool(rec["upper_holds"]):
            problems.append(f"sandwich k={row['k']}, q={row['q']}, lambda={row['lambda']}: verdict inconsistent with counts")
        if row["lower_holds"] != fmt(bool(rec["lower_holds"])) or row["upper_holds"] != fmt(bool(rec["upper_holds"])):
            problems.append(f"sandwich k={row['k']}, q={row['q']}, lambda={row['lambda']}: CSV flags differ from report.json")
    return problems


# ---------------------------------------------------------------------------
# CLI
# ---------------------------------------------------------------------------


@click.group()
def cli():
    """Holomorphic Morse inequality experiments on magnetic torus models."""


@cli.command()
@click.argument("config", type=click.Path(exists=True, dir_okay=False))
@click.option("--workers", type=int, default=None, help="Worker pool size (default from config).")
@click.option("--seed", type=int, default=None, help="Override the config seed.")
@click.option("--out", "out", type=click.Path(file_okay=False), default=None, help="Output directory.")
def run(config, workers, seed, out):
    """Run the experiment described by CONFIG."""
    cfg = load_config(config)
    if seed is not None:
        cfg = ExperimentConfig.from_dict(cfg.to_dict() | {"seed": seed})
    try:
        report = run_experiment(cfg, out_dir=out, workers=workers)
    except HolomorseError as exc:
        raise click.ClickException(f"{type(exc).__name__}: {exc}") from exc
    target = out if out is not None else cfg.output_dir
    for v in report.verdicts:
        click.echo(f"k={v.k:<4d} h={list(round(x, 6) for x in v.measured)} inequalities {'hold' if v.all_hold else 'FAIL'}")
    bad = [s for s in report.sandwich if not s.holds]
    if report.sandwich:
        click.echo(f"sandwich: {len(report.sandwich) - len(bad)}/{len(report.sandwich)} hold")
    click.echo(f"wrote {target}")


@cli.command()
@click.argument("report_dir", type=click.Path(exists=True, file_okay=False))
def table(report_dir):
    """Print the convergence table of REPORT_DIR."""
    rep = RunReport.from_dict(json.loads((Path(report_dir) / "report.json").read_text()))
    try:
        rows = convergence_table(rep)
    except InsufficientSeries as exc:
        raise click.ClickException(str(exc)) from exc
    click.echo("  ".join(f"{c:>17s}" for c in CONVERGENCE_COLUMNS))
    for r in rows:
        click.echo("  ".join(f"{fmt(r[c]):>17s}" for c in CONVERGENCE_COLUMNS))


@cli.command()
@click.argument("report_dir", type=click.Path(exists=True, file_okay=False))
def check(report_dir):
    """Re-verify the verdicts of REPORT_DIR from its CSV files."""
    problems = check_report_dir(report_dir)
    for p in problems:
        click.echo(f"MISMATCH {p}")
    if problems:
        raise SystemExit(1)
    click.echo("all verdicts reproduce from CSV")


if __name__ == "__main__":  # pragma: no cover
    cli()
