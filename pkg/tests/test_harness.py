import json
from pathlib import Path

import pytest
import yaml
from click.testing import CliRunner

from holomorse.errors import ConfigError, InsufficientSeries, LambdaOnJump
from holomorse.harness import (
    CONVERGENCE_COLUMNS,
    ExperimentConfig,
    RunReport,
    _annotate,
    check_report_dir,
    cli,
    convergence_table,
    load_config,
    run_experiment,
)

ROOT = Path(__file__).resolve().parents[1]


def cfg(**over):
    base = {
        "experiment_name": "t",
        "model": {"n": 1, "resolution": 16},
        "curvature": {"kind": "constant", "degrees": [2]},
        "k_list": [1, 2, 3],
        "q_list": [0, 1],
    }
    base.update(over)
    return ExperimentConfig.from_dict(base)


@pytest.mark.parametrize("name", ["elliptic_curve.yaml", "mixed_signature_n2.yaml"])
def test_example_configs_validate(name):
    c = load_config(ROOT / "configs" / name)
    assert c.k_list == tuple(sorted(c.k_list))


def test_config_guards():
    with pytest.raises(ConfigError):
        cfg(k_list=[2, 1])
    with pytest.raises(ConfigError):
        cfg(q_list=[0, 2])
    with pytest.raises(ConfigError):
        cfg(unknown_field=1)
    with pytest.raises(ConfigError):
        cfg(model={"n": 1})
    with pytest.raises(ConfigError):
        cfg(boundary={"schedule": "fixed"})


def test_lambda_on_level_rejected(tmp_path):
    # alpha = 4 pi: q=0 density jumps at lambda = 0 and 2 alpha p
    c = cfg(lambda_list=[8 * 3.141592653589793], k_list=[1, 2])
    with pytest.raises(ConfigError):
        run_experiment(c, out_dir=tmp_path)


def test_elliptic_degree_two_convergence_constant(tmp_path):
    rep = run_experiment(cfg(), out_dir=tmp_path)
    rows = convergence_table(rep)
    assert [r["q"] for r in rows] == [0, 0, 0, 1, 1, 1]
    assert [r["k"] for r in rows] == [1, 2, 3, 1, 2, 3]
    assert all(r["measured_over_kn"] == pytest.approx(2.0) for r in rows if r["q"] == 0)
    assert all(r["measured_over_kn"] == 0.0 for r in rows if r["q"] == 1)
    assert all(v.all_hold for v in rep.verdicts)
    header = (tmp_path / "convergence.csv").read_text().splitlines()[0]
    assert tuple(header.split(",")) == CONVERGENCE_COLUMNS


def test_flat_case(tmp_path):
    rep = run_experiment(cfg(curvature={"kind": "constant", "alphas": [0.0]}), out_dir=tmp_path)
    assert rep.morse.integrals_I == (0.0, 0.0)
    meas = rep.measured()
    assert {meas[(k, 0)] for k in (1, 2, 3)} == {1.0}
    rows = convergence_table(rep)
    # leading coefficients vanish on both sides; the finite-k residue is 1/k
    for r in rows:
        assert r["bound_coeff"] == 0.0
        assert r["measured_over_kn"] == pytest.approx(1.0 / r["k"])


def test_single_k_is_insufficient(tmp_path):
    rep = run_experiment(cfg(k_list=[2]), out_dir=tmp_path)
    with pytest.raises(InsufficientSeries):
        convergence_table(rep)


def test_report_round_trip(tmp_path):
    rep = run_experiment(cfg(k_list=[1, 2]), out_dir=tmp_path)
    back = RunReport.from_dict(json.loads((tmp_path / "report.json").read_text()))
    assert convergence_table(back) == convergence_table(rep)


def test_errors_are_annotated():
    e = _annotate(LambdaOnJump("on a level"), "k=2, q=0, lambda=1")
    assert isinstance(e, LambdaOnJump) and "k=2, q=0, lambda=1" in str(e)


def write_cfg(tmp_path, **over):
    d = {
        "experiment_name": "cli",
        "model": {"n": 1, "resolution": 8, "cover": {"kind": "translations", "orders": [2, 1]}},
        "curvature": {"kind": "constant", "degrees": [1]},
        "k_list": [1, 2],
        "q_list": [0, 1],
        "lambda_list": [0.5, 3.0],
        "sandwich": {"enabled": True},
    }
    d.update(over)
    p = tmp_path / "c.yaml"
    p.write_text(yaml.safe_dump(d))
    return p


def test_cli_run_table_check(tmp_path):
    p = write_cfg(tmp_path)
    out = tmp_path / "out"
    runner = CliRunner()
    r = runner.invoke(cli, ["run", str(p), "--out", str(out), "--workers", "2", "--seed", "3"])
    assert r.exit_code == 0, r.output
    for f in ("report.json", "counts.csv", "convergence.csv", "sandwich.csv"):
        assert (out / f).exists()
    assert json.loads((out / "report.json").read_text())["provenance"]["seed"] == 3
    r = runner.invoke(cli, ["table", str(out)])
    assert r.exit_code == 0 and "measured_over_kn" in r.output
    r = runner.invoke(cli, ["check", str(out)])
    assert r.exit_code == 0 and "reproduce" in r.output
    assert check_report_dir(out) == []


def test_check_detects_tampering(tmp_path):
    p = write_cfg(tmp_path)
    out = tmp_path / "out"
    CliRunner().invoke(cli, ["run", str(p), "--out", str(out)])
    conv = (out / "convergence.csv").read_text().splitlines()
    parts = conv[1].split(",")
    parts[4] = "-5"  # slack flips sign but report.json says the inequality holds
    conv[1] = ",".join(parts)
    (out / "convergence.csv").write_text("\n".join(conv) + "\n")
    r = CliRunner().invoke(cli, ["check", str(out)])
    assert r.exit_code == 1 and "MISMATCH" in r.output


def test_workers_do_not_change_output(tmp_path):
    p = write_cfg(tmp_path)
    a, b = tmp_path / "a", tmp_path / "b"
    CliRunner().invoke(cli, ["run", str(p), "--out", str(a), "--workers", "1"])
    CliRunner().invoke(cli, ["run", str(p), "--out", str(b), "--workers", "3"])
    for f in ("counts.csv", "convergence.csv", "sandwich.csv"):
        assert (a / f).read_bytes() == (b / f).read_bytes()
