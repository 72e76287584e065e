import os

import numpy as np
import pytest

from causalbb import cli, harness
from causalbb.errors import ParseError, SchemaError, SingularDesignError, ValidationError

MINIMAL = """
[run]
scenarios = ex1-normal
n = 100
replicates = 3

[estimator.2S]
engine = parametric-2S
design = 2S
"""


def write_cfg(tmp_path, text, name="study.cfg"):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


# ---------------------------------------------------------------------------
# parse_config


def test_minimal_config_defaults(tmp_path):
    cfg = cli.parse_config(write_cfg(tmp_path, MINIMAL))
    assert cfg.scenarios == ("ex1-normal",)
    assert cfg.n_list == (100,)
    assert cfg.R == 3
    assert cfg.L == 1000
    assert cfg.master_seed == 0
    assert cfg.workers == (os.cpu_count() or 1)
    assert cfg.format == "csv"
    assert cfg.out == "."
    est = cfg.estimators[0]
    assert est.label == "2S" and est.engine == "parametric-2S" and est.L == 1000


def test_unknown_run_key_is_named(tmp_path):
    bad = MINIMAL.replace("replicates = 3", "replicates = 3\nestimatr = UN")
    with pytest.raises(ParseError, match="estimatr"):
        cli.parse_config(write_cfg(tmp_path, bad))


def test_unknown_estimator_key_is_named(tmp_path):
    bad = MINIMAL + "prir_sd = 2\n"
    with pytest.raises(ParseError, match="prir_sd"):
        cli.parse_config(write_cfg(tmp_path, bad))


def test_key_rejected_for_wrong_engine(tmp_path):
    bad = MINIMAL + "truncation = 10\n"
    with pytest.raises(ValidationError, match="truncation"):
        cli.parse_config(write_cfg(tmp_path, bad))


def test_seed_precedence(tmp_path, monkeypatch):
    text = MINIMAL.replace("replicates = 3", "replicates = 3\nseed = 3")
    path = write_cfg(tmp_path, text)
    assert cli.parse_config(path).master_seed == 3
    assert cli.parse_config(path, overrides={"seed": 7}).master_seed == 7
    monkeypatch.setenv("CAUSALBB_SEED", "11")
    assert cli.parse_config(path).master_seed == 3    # file beats env
    plain = write_cfg(tmp_path, MINIMAL, name="noseed.cfg")
    assert cli.parse_config(plain).master_seed == 11  # env fills the gap


def test_no_estimators_rejected(tmp_path):
    text = MINIMAL.split("[estimator.2S]")[0]
    with pytest.raises(ValidationError, match="no estimators"):
        cli.parse_config(write_cfg(tmp_path, text))


def test_unknown_scenario_rejected(tmp_path):
    text = MINIMAL.replace("ex1-normal", "ex9-mystery")
    with pytest.raises(ValidationError, match="ex9-mystery"):
        cli.parse_config(write_cfg(tmp_path, text))


def test_incompatible_pair_rejected_at_parse_time(tmp_path):
    text = MINIMAL + "\n[estimator.ATT]\nengine = bb-att\n"
    with pytest.raises(ValidationError):
        cli.parse_config(write_cfg(tmp_path, text))


def test_duplicate_labels_rejected(tmp_path):
    # configparser already refuses duplicate sections; it surfaces as ParseError
    text = MINIMAL + "\n[estimator.2S]\nengine = parametric-2S\ndesign = 2S\n"
    with pytest.raises(ParseError):
        cli.parse_config(write_cfg(tmp_path, text))


def test_estimator_subset_override(tmp_path):
    text = MINIMAL + "\n[estimator.CF]\nengine = parametric-CF\ndesign = CF\n"
    path = write_cfg(tmp_path, text)
    cfg = cli.parse_config(path, overrides={"estimators": ["CF"]})
    assert [e.label for e in cfg.estimators] == ["CF"]
    with pytest.raises(ValidationError, match="UNKNOWN"):
        cli.parse_config(path, overrides={"estimators": ["UNKNOWN"]})


def test_clamp_applies_to_weighting_engines_only(tmp_path):
    text = """
[run]
scenarios = ex2-s1
n = 100
replicates = 2
clamp = 25

[estimator.IPW]
engine = bb-ipw

[estimator.2S]
engine = parametric-2S
design = 2S
"""
    cfg = cli.parse_config(write_cfg(tmp_path, text))
    by = {e.label: e for e in cfg.estimators}
    assert by["IPW"].truncation == 25.0
    assert by["2S"].truncation is None


def test_gamma_coherence_checks(tmp_path):
    text = MINIMAL + "\n[estimator.PS]\ndesign = PS\ngamma = linked\n"
    with pytest.raises(ValidationError, match="true"):
        cli.parse_config(write_cfg(tmp_path, text))
    text = MINIMAL + "\n[estimator.CFB]\nengine = bb-cut-feedback\ndesign = CF\ngamma = linked\n"
    with pytest.raises(ValidationError, match="cut feedback"):
        cli.parse_config(write_cfg(tmp_path, text))


def test_preset_unknown_name_lists_available():
    with pytest.raises(ParseError, match="table1"):
        cli.parse_config(preset="tableZZ")


def test_both_or_neither_source_rejected(tmp_path):
    with pytest.raises(ParseError):
        cli.parse_config()
    with pytest.raises(ParseError):
        cli.parse_config(write_cfg(tmp_path, MINIMAL), preset="table1")


# ---------------------------------------------------------------------------
# main / cmd_run


def test_run_end_to_end(tmp_path, capsys):
    path = write_cfg(tmp_path, MINIMAL)
    out = tmp_path / "res"
    code = cli.main(["run", "--config", path, "--out", str(out), "--L", "200"])
    assert code == 0
    rows = cli.load_metrics_csv(out / "metrics.csv")
    assert len(rows) == 1
    assert rows[0].estimator == "2S" and rows[0].R == 3
    assert (out / "replicates.csv").exists()
    err = capsys.readouterr().err
    assert "metrics.csv" in err


def test_run_bad_config_exits_2(tmp_path, capsys):
    path = write_cfg(tmp_path, MINIMAL.replace("ex1-normal", "nope"))
    assert cli.main(["run", "--config", path]) == 2
    assert "causalbb:" in capsys.readouterr().err


def test_run_engine_failure_exits_3(tmp_path, monkeypatch, capsys):
    def explode(*a, **k):
        raise SingularDesignError("forced")
    monkeypatch.setattr(harness, "run_replicates", explode)
    path = write_cfg(tmp_path, MINIMAL)
    assert cli.main(["run", "--config", path, "--out", str(tmp_path / "o")]) == 3
    assert "forced" in capsys.readouterr().err


def test_run_seed_flag_changes_results(tmp_path):
    path = write_cfg(tmp_path, MINIMAL)
    outs = []
    for seed in (7, 7, 8):
        out = tmp_path / f"out{len(outs)}"
        assert cli.main(["run", "--config", path, "--out", str(out),
                         "--L", "150", "--seed", str(seed)]) == 0
        outs.append((out / "metrics.csv").read_text())

    def strip_wall(text):
        return [line.rsplit(",", 1)[0] for line in text.splitlines()]

    assert strip_wall(outs[0]) == strip_wall(outs[1])
    assert strip_wall(outs[0]) != strip_wall(outs[2])


def test_scenarios_and_estimators_commands(capsys):
    assert cli.main(["scenarios"]) == 0
    out = capsys.readouterr().out
    for name in ("ex1-normal", "ex2-s3", "msm-2stage", "dr-poisson"):
        assert name in out
    assert cli.main(["estimators"]) == 0
    out = capsys.readouterr().out
    for eng in harness.ENGINES:
        assert eng in out


# ---------------------------------------------------------------------------
# table rendering


def test_render_table_layout():
    rows = [
        harness.MetricsRow("ex1-normal", "2S", 200, 250, 0.0123, 0.2, 0.2004,
                           94.8, 0, 1.0),
        harness.MetricsRow("ex1-normal", "2S", 2000, 250, -0.0045, 0.07, 0.0701,
                           95.2, 0, 2.0),
        harness.MetricsRow("ex1-normal", "CF", 200, 250, 0.059, 0.21, 0.218,
                           93.6, 0, 1.5),
    ]
    text = cli.render_table(rows)
    assert "scenario: ex1-normal" in text
    for title in ("Bias", "SD", "RMSE", "Coverage"):
        assert title in text
    assert "0.012" in text and "-0.004" in text    # 3-decimal cells
    assert "94.800" in text
    lines = text.splitlines()
    header = next(l for l in lines if "n=200" in l)
    assert "n=2000" in header


def test_table_round_trip(tmp_path, capsys):
    path = write_cfg(tmp_path, MINIMAL)
    out = tmp_path / "rt"
    assert cli.main(["run", "--config", path, "--out", str(out),
                     "--L", "150"]) == 0
    capsys.readouterr()
    assert cli.main(["table", str(out / "metrics.csv")]) == 0
    text = capsys.readouterr().out
    row = cli.load_metrics_csv(out / "metrics.csv")[0]
    assert f"{row.bias:.3f}" in text
    assert f"{row.coverage:.3f}" in text


def test_load_metrics_csv_schema_errors(tmp_path):
    empty = tmp_path / "empty.csv"
    empty.write_text("")
    with pytest.raises(SchemaError, match="empty"):
        cli.load_metrics_csv(empty)
    wrong = tmp_path / "wrong.csv"
    wrong.write_text("a,b,c\n1,2,3\n")
    with pytest.raises(SchemaError, match="header"):
        cli.load_metrics_csv(wrong)
    headonly = tmp_path / "headonly.csv"
    headonly.write_text(",".join(harness.METRICS_HEADER) + "\n")
    with pytest.raises(SchemaError, match="no data"):
        cli.load_metrics_csv(headonly)
    missing = tmp_path / "missing.csv"
    with pytest.raises(SchemaError, match="cannot read"):
        cli.load_metrics_csv(missing)


def test_preset_table1_unadjusted_bias(tmp_path):
    out = tmp_path / "t1"
    code = cli.main(["run", "--preset", "table1", "--estimators", "UN",
                     "--n", "2000", "--R", "60", "--L", "300",
                     "--seed", "5", "--out", str(out)])
    assert code == 0
    row = cli.load_metrics_csv(out / "metrics.csv")[0]
    assert row.estimator == "UN"
    assert abs(row.bias - 2.089) < 0.05
