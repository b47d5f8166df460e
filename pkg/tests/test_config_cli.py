import json
import os
import re

import numpy as np
import pytest

from conftest import CONFIG_DIR
from interhom.cli import main, report_json, run_pipeline, stage_seed, summary_text, write_outputs
from interhom.config import PIPELINE, load_config, parse_config, validate_stages
from interhom.errors import ConfigError, StageError
from interhom.sde import simulate_path

QUICK = """
field: {dim: %(dim)d}
seed: 5
out: %(out)s
grid: {n: 16, k_trunc: 8}
sim: {epsilon: 0.2, n_paths: 400}
limit: {h: 0.01, T: 1.0, n_paths: 1000}
compare: {epsilon: 0.2, dt: 0.01, n_paths: 1000}
"""


def quick(tmp_path, dim=2, extra=""):
    return parse_config(QUICK % {"dim": dim, "out": str(tmp_path / "out")} + extra)


def test_minimal_config_defaults():
    cfg = parse_config("field: {dim: 2}")
    assert cfg.eta == 0.5 and cfg.a == 0.75 and cfg.k_trunc == 8
    assert cfg.stages == PIPELINE and cfg.seed == 0
    assert cfg.sim["n_paths"] == 10_000


def test_unknown_keys_are_named():
    with pytest.raises(ConfigError, match="foo"):
        parse_config("field: {dim: 2}\nfoo: 1")
    with pytest.raises(ConfigError, match="sim.bar"):
        parse_config("field: {dim: 2}\nsim: {bar: 1}")


def test_stage_list_must_be_a_prefix():
    with pytest.raises(ConfigError, match="prefix"):
        parse_config("field: {dim: 2}\nstages: [simulate]")
    assert validate_stages(["cell", "strip"]) == ("cell", "strip")
    with pytest.raises(ConfigError, match="unknown stage"):
        validate_stages(["cell", "plot"])


def test_yaml_errors_carry_line_numbers():
    with pytest.raises(ConfigError) as err:
        parse_config("field: {dim: 2}\nseed: 1\nsim: [1, 2\n")
    assert err.value.line is not None and err.value.line >= 3
    assert "line" in str(err.value)


@pytest.mark.parametrize("text, name", [
    ("field: {dim: 2}\nsim: {epsilon: fast}", "sim.epsilon"),
    ("field: {dim: 2}\ngrid: {order: 3}", "grid.order"),
    ("field: {dim: 2}\nsim: {a: 0.4}", "sim.a"),
    ("field: {dim: 2}\nseed: -1", "seed"),
    ("field: missing_field_file.yaml", "field"),
    ("seed: 1", "field"),
])
def test_validation_errors_name_the_field(text, name):
    with pytest.raises(ConfigError) as err:
        parse_config(text, base_dir=CONFIG_DIR)
    assert err.value.field == name


def test_shipped_configs_parse():
    for name in ("zero_2d.yaml", "oracle_1d.yaml", "bump_2d.yaml"):
        cfg = load_config(os.path.join(CONFIG_DIR, name))
        assert cfg.field_text and cfg.drift().dim == cfg.dim


def test_stage_seeds_differ():
    assert len({stage_seed(1, s) for s in PIPELINE}) == len(PIPELINE)


def test_zero_drift_pipeline(tmp_path):
    cfg = quick(tmp_path)
    report, estimates = run_pipeline(cfg)
    res = report["results"]
    np.testing.assert_allclose(res["cell"]["plus"]["D"], np.eye(2), atol=1e-12)
    assert res["params"]["p_plus"] == pytest.approx(0.5, abs=1e-12)
    assert res["params"]["alpha"] == pytest.approx([0.0], abs=1e-12)
    assert report["passed"], [c for c in report["checks"] if not c["passed"]]
    assert os.path.isfile(tmp_path / "out" / "params.json")
    assert {e.name for e in estimates} >= {"p_plus", "tangential_drift[2]"}


def test_reports_are_byte_identical(tmp_path):
    cfg = quick(tmp_path, dim=1)
    a, _ = run_pipeline(cfg)
    b, _ = run_pipeline(quick(tmp_path, dim=1))
    assert report_json(a) == report_json(b)
    c, _ = run_pipeline(quick(tmp_path, dim=1, extra="\n").with_stages("simulate"))
    assert report_json(c) != report_json(a)


def test_summary_numbers_appear_in_report(tmp_path):
    report, _ = run_pipeline(quick(tmp_path, dim=1))
    text = report_json(report)
    summary = summary_text(report)
    numbers = re.findall(r"=(-?[0-9][0-9.e+-]*)", summary)
    assert numbers
    for num in numbers:
        assert num in text, num


def test_stage_failure_names_the_stage(tmp_path):
    # a constant push on one side has no centered corrector
    cfg = parse_config("field: {dim: 1, plus: [{axis: 0, k: [0], cos: 1.0}]}\n"
                       f"out: {tmp_path}\nstages: [cell]")
    with pytest.raises(StageError) as err:
        run_pipeline(cfg)
    assert err.value.stage == "cell"


def test_export_paths(tmp_path):
    cfg = quick(tmp_path, dim=1, extra="export: {n_paths: 1, T_micro: 2.0, dt: 0.01, stride: 1, "
                                        "limit_stride: 10}\n")
    cfg.sim["epsilon"] = 1.0
    cfg = cfg.with_stages("simulate")
    run_pipeline(cfg)
    folder = tmp_path / "out" / "paths"
    assert sorted(os.listdir(folder)) == ["limit_000.tsv", "micro_000.tsv", "rescaled_000.tsv"]
    micro = np.loadtxt(folder / "micro_000.tsv", skiprows=1)
    assert np.all(np.diff(micro[:, 0]) > 0)
    ref = simulate_path(cfg.drift(), [0.0], 0.01, 2.0, stage_seed(cfg.seed, "export"), 0)
    np.testing.assert_array_equal(micro[:, 1], ref.x[:, 0])
    np.testing.assert_array_equal(np.loadtxt(folder / "rescaled_000.tsv", skiprows=1), micro)
    limit = np.loadtxt(folder / "limit_000.tsv", skiprows=1)
    assert open(folder / "limit_000.tsv").readline().split() == ["t", "x1", "L"]
    assert np.all(np.diff(limit[:, -1]) >= 0)


def test_cli_exit_codes(tmp_path, capsys):
    path = tmp_path / "run.yaml"
    path.write_text(QUICK % {"dim": 1, "out": str(tmp_path / "cli")})
    assert main(["params", "--config", str(path)]) == 0
    out = capsys.readouterr().out
    assert "overall: PASS" in out
    report = json.loads((tmp_path / "cli" / "report.json").read_text())
    assert report["stages"] == ["cell", "strip", "params"]
    assert (tmp_path / "cli" / "estimates.tsv").read_text().startswith("estimator\tvalue\tstderr")
    assert main(["all", "--config", str(path), "--stage", "strip", "--out",
                 str(tmp_path / "b")]) == 0
    assert json.loads((tmp_path / "b" / "report.json").read_text())["stages"] == ["cell", "strip"]
    bad = tmp_path / "bad.yaml"
    bad.write_text("field: {dim: 1}\nfoo: 2\n")
    assert main(["all", "--config", str(bad)]) == 2
    assert "foo" in capsys.readouterr().err
    assert main(["cell", "--config", str(path), "--stage", "strip"]) == 2


def test_failing_check_gives_exit_status_one(tmp_path, monkeypatch):
    import interhom.cli as cli
    cfg = quick(tmp_path, dim=1).with_stages("params")

    def failing(run):
        run.check("forced", False)

    monkeypatch.setitem(cli._STAGES, "params", failing)
    report, est = run_pipeline(cfg)
    assert not report["passed"]
    path = tmp_path / "run.yaml"
    path.write_text(QUICK % {"dim": 1, "out": str(tmp_path / "x")} + "stages: [cell, strip, params]\n")
    assert main(["all", "--config", str(path)]) == 1
    write_outputs(cfg, report, est)
    assert "[FAIL] forced" in (tmp_path / "out" / "summary.txt").read_text()


@pytest.mark.slow
def test_oracle_config_exit_probability_agrees(tmp_path):
    cfg = load_config(os.path.join(CONFIG_DIR, "oracle_1d.yaml")).with_stages("simulate")
    cfg.out = str(tmp_path)
    cfg.export["n_paths"] = 0
    report, _ = run_pipeline(cfg)
    check = next(c for c in report["checks"] if c["name"] == "simulate.exit_probability")
    assert check["passed"] and abs(check["z"]) <= 3
