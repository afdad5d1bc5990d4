"""Command-line driver: config handling, exit codes, output artifacts."""
import json

import numpy as np
import pytest

from cghom import cli


def _run(argv, tmp_path=None):
    args = list(argv)
    if tmp_path is not None:
        args += ["--output-dir", str(tmp_path)]
    return cli.main(args)


def _load_report(path):
    body = json.loads(path.read_text())
    body.pop("meta", None)
    return body


@pytest.fixture(autouse=True)
def _no_env_output_dir(monkeypatch):
    monkeypatch.delenv("CGHOM_OUTPUT_DIR", raising=False)


def test_selftest_passes(tmp_path, capsys):
    assert _run(["selftest"], tmp_path) == 0
    out = capsys.readouterr().out
    assert out.count("PASS") == 9
    assert "FAIL" not in out
    assert "0 failure(s)" in out


def test_selftest_gate_exit_code(tmp_path, monkeypatch):
    monkeypatch.setattr(cli, "_selftest_checks",
                        lambda: [("forced", lambda: (False, "broken"))])
    assert _run(["selftest"], tmp_path) == 4


def test_config_file_errors(tmp_path):
    bad_section = tmp_path / "bad.json"
    bad_section.write_text(json.dumps({"fields": {"kind": "laminate"}}))
    assert _run(["selftest", "--config", str(bad_section)], tmp_path) == 2
    not_json = tmp_path / "broken.json"
    not_json.write_text("{nope")
    assert _run(["selftest", "--config", str(not_json)], tmp_path) == 2
    assert _run(["selftest", "--config", str(tmp_path / "missing.json")],
                tmp_path) == 2


@pytest.mark.parametrize("override", [
    "norms.zeta=0.5",                 # unknown key
    "dim=5",                          # unsupported dimension
    "norms.s=0.6",                    # with default t=0.4 breaks s + t < 1
    "ergodic.samples=1",
    "field.kind=\"perlin\"",
    "homexp.target.family=\"bump\"",
    "coarsegrain.resolution=0",
    "workers=0",
])
def test_invalid_overrides_exit_2(tmp_path, override):
    assert _run(["selftest", "--set", override], tmp_path) == 2


def test_malformed_override_and_negative_seed(tmp_path):
    assert _run(["selftest", "--set", "no_equals_sign"], tmp_path) == 2
    assert _run(["selftest", "--seed", "-3"], tmp_path) == 2


def test_gen_field_writes_file(tmp_path, capsys):
    assert _run(["gen-field"], tmp_path) == 0
    out = capsys.readouterr().out
    assert "wrote" in out
    assert (tmp_path / "field_checkerboard_n2_seed0.cghf").exists()


def test_degenerate_field_is_numerical_failure(tmp_path):
    code = _run(["gen-field", "--set",
                 'field.params={"matrix": [[0.0, 0.0], [0.0, 0.0]]}',
                 "--set", 'field.kind="constant"'], tmp_path)
    assert code == 3


def test_ergodic_outputs_are_deterministic(tmp_path):
    sets = ["--set", "ergodic.samples=4", "--set", "ergodic.n_max=2",
            "--set", "ergodic.csv=true"]
    d1, d2 = tmp_path / "run1", tmp_path / "run2"
    assert _run(["ergodic"] + sets, d1) == 0
    assert _run(["ergodic"] + sets, d2) == 0
    j1, = d1.glob("ergodic_*.json")
    j2, = d2.glob("ergodic_*.json")
    assert _load_report(j1) == _load_report(j2)
    c1, = d1.glob("ergodic_samples_*.csv")
    c2, = d2.glob("ergodic_samples_*.csv")
    assert c1.read_bytes() == c2.read_bytes()
    # the embedded digest is the fingerprint of the merged validated config
    config = cli.apply_overrides(cli.load_config(None),
                                 ["ergodic.samples=4", "ergodic.n_max=2",
                                  "ergodic.csv=true"])
    cli.validate_config(config)
    want = cli.config_fingerprint(config)
    assert _load_report(j1)["config_sha256"] == want
    assert j1.name == f"ergodic_{want[:10]}.json"
    report = _load_report(j1)
    assert [e["n"] for e in report["per_scale"]] == [1, 2]
    assert report["monotone"]["ok"] in (True, False)
    assert "a_bar" in report or "a_bar_error" in report


def test_output_dir_precedence(tmp_path, monkeypatch):
    cfg_dir = tmp_path / "from_config"
    env_dir = tmp_path / "from_env"
    flag_dir = tmp_path / "from_flag"
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"output_dir": str(cfg_dir)}))
    assert cli.main(["gen-field", "--config", str(cfg)]) == 0
    assert any(cfg_dir.glob("*.cghf"))
    monkeypatch.setenv("CGHOM_OUTPUT_DIR", str(env_dir))
    assert cli.main(["gen-field", "--config", str(cfg)]) == 0
    assert any(env_dir.glob("*.cghf"))
    assert cli.main(["gen-field", "--config", str(cfg),
                     "--output-dir", str(flag_dir)]) == 0
    assert any(flag_dir.glob("*.cghf"))


def test_coarsegrain_command_artifacts(tmp_path, capsys):
    assert _run(["coarsegrain"], tmp_path) == 0
    assert "ordering diagnostics" in capsys.readouterr().out
    report_path, = tmp_path.glob("coarsegrain_*.json")
    report = _load_report(report_path)
    for key in ("s_star", "k", "b", "s", "sandwich_defect"):
        assert key in report
    assert report["subadditivity_defect"] > -1e-8
    assert report["diagnostics"] == []
    assert (tmp_path / report["cache_file"]).exists()


def test_ellipticity_command_with_field_file(tmp_path):
    assert _run(["gen-field"], tmp_path) == 0
    field_file = str(tmp_path / "field_checkerboard_n2_seed0.cghf")
    assert _run(["ellipticity", field_file, "--set", "norms.p=6",
                 "--set", "norms.q=6"], tmp_path) == 0
    report_path, = tmp_path.glob("ellipticity_*.json")
    report = _load_report(report_path)
    assert report["lambda_s"] > 0 and report["Lambda_t"] >= report["lambda_s"]
    assert report["embedding"]["ok"]
    csv_path, = tmp_path.glob("ellipticity_*.csv")
    header, row = csv_path.read_text().strip().splitlines()
    assert header.split(",")[-1] == "config_sha256"
    assert row.split(",")[-1] == report["config_sha256"]


def test_homogenize_worker_equivalence(tmp_path):
    sets = ["--set", 'field.kind="laminate"',
            "--set", 'field.params={"a1": 1.0, "a2": 4.0, "phase": "random"}',
            "--set", "homexp.a_bar=[[1.6, 0.0], [0.0, 2.5]]",
            "--set", "homexp.n_max=2", "--set", "homexp.seeds=2"]
    d1, d2 = tmp_path / "w1", tmp_path / "w2"
    assert _run(["homogenize"] + sets + ["--workers", "1"], d1) == 0
    assert _run(["homogenize"] + sets + ["--workers", "2"], d2) == 0
    s1, = d1.glob("homog_summary_*.json")
    s2, = d2.glob("homog_summary_*.json")
    r1, r2 = _load_report(s1), _load_report(s2)
    # the digests differ (workers is part of the config), the numbers don't
    for rep in (r1, r2):
        rep.pop("config_sha256")
    assert r1 == r2
    assert r1["failures"] == 0
    assert len(r1["median_grad_err"]) == 2


def test_cascade_verify_smoke(tmp_path, capsys):
    code = _run(["cascade-verify",
                 "--set", "cascade.draws=20000",
                 "--set", "cascade.slope_seeds=5",
                 "--set", "cascade.slope_level=1",
                 "--set", "cascade.trend_levels=[2, 3]",
                 "--set", "cascade.trend_seeds=3"], tmp_path)
    assert code == 0
    assert "slope rel err" in capsys.readouterr().out
    report_path, = tmp_path.glob("cascade_*.json")
    report = _load_report(report_path)
    assert {"moments", "slope", "bounded_trend"} <= set(report)
    assert len(report["moments"]) == 6
    assert report["slope"]["m_max"] == 6


def test_override_value_parsing():
    cfg = cli.apply_overrides(cli.load_config(None),
                              ["workers=3", 'field.kind="laminate"',
                               "norms.tail=false"])
    assert cfg["workers"] == 3
    assert cfg["field"]["kind"] == "laminate"
    assert cfg["norms"]["tail"] is False
    # bare words (not valid JSON) fall back to strings
    cfg2 = cli.apply_overrides(cli.load_config(None), ["field.kind=laminate"])
    assert cfg2["field"]["kind"] == "laminate"
