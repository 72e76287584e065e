import csv

import numpy as np
import pytest

from causalbb import dgp, harness, numopt, posterior
from causalbb.errors import SingularDesignError, ValidationError


def make_draws(values, name="ate"):
    arr = np.asarray(values, dtype=float)[:, None]
    return posterior.PosteriorDraws(names=(name,), draws=arr, meta={})


# ---------------------------------------------------------------------------
# summarize_draws and compute_metrics


def test_summarize_constant_draws():
    point, (lo, hi) = harness.summarize_draws(make_draws(np.full(50, 5.0)), "ate")
    assert point == 5.0
    assert (lo, hi) == (5.0, 5.0)


def test_summarize_percentiles_interpolate():
    point, (lo, hi) = harness.summarize_draws(make_draws(np.arange(1, 101)), "ate")
    assert point == pytest.approx(50.5)
    assert lo == pytest.approx(3.475)
    assert hi == pytest.approx(97.525)


def test_summarize_matches_normal_quantiles():
    rng = np.random.default_rng(12)
    point, (lo, hi) = harness.summarize_draws(
        make_draws(rng.standard_normal(100_000)), "ate")
    assert abs(point) < 0.02
    assert abs(lo + 1.95996) < 0.03
    assert abs(hi - 1.95996) < 0.03


def test_compute_metrics_by_hand():
    met = harness.compute_metrics([1.0, 2.0, 3.0],
                                  [(0, 3), (0, 3), (10, 11)], truth=2.0)
    assert met["bias"] == pytest.approx(0.0)
    assert met["sd"] == pytest.approx(np.sqrt(2.0 / 3.0))
    assert met["rmse"] == pytest.approx(np.sqrt(2.0 / 3.0))
    assert met["coverage"] == pytest.approx(200.0 / 3.0)


def test_rmse_decomposition_identity():
    rng = np.random.default_rng(5)
    pts = list(rng.normal(0.7, 1.3, size=40))
    cis = [(p - 1, p + 1) for p in pts]
    met = harness.compute_metrics(pts, cis, truth=0.3)
    assert met["rmse"] ** 2 == pytest.approx(met["bias"] ** 2 + met["sd"] ** 2,
                                             abs=1e-12)


def test_single_replicate_metrics():
    met = harness.compute_metrics([2.5], [(2.4, 2.6)], truth=2.5)
    assert met["sd"] == 0.0
    assert met["coverage"] == 100.0
    met = harness.compute_metrics([2.5], [(2.4, 2.6)], truth=10.0)
    assert met["coverage"] == 0.0


def test_compute_metrics_rejects_bad_input():
    with pytest.raises(ValueError):
        harness.compute_metrics([], [], truth=0.0)
    with pytest.raises(ValueError):
        harness.compute_metrics([1.0, 2.0], [(0, 1)], truth=0.0)


# ---------------------------------------------------------------------------
# Estimator validation


def test_estimator_spec_validation():
    with pytest.raises(ValidationError):
        harness.EstimatorSpec(label="x", engine="parametric-3S", design="2S")
    with pytest.raises(ValidationError):
        harness.EstimatorSpec(label="x", engine="parametric-2S", design="2S", L=0)


def test_validate_estimator_rejects_mismatches():
    spec = dgp.get_scenario("ex1-normal")
    att = harness.EstimatorSpec(label="att", engine="bb-att")
    with pytest.raises(ValidationError, match="targets"):
        harness.validate_estimator(att, spec)
    jt = harness.EstimatorSpec(label="jt", engine="parametric-JT", design="2S")
    with pytest.raises(ValidationError, match="JT"):
        harness.validate_estimator(jt, spec)
    nodesign = harness.EstimatorSpec(label="nd", engine="parametric-2S")
    with pytest.raises(ValidationError, match="design"):
        harness.validate_estimator(nodesign, spec)
    msm = dgp.get_scenario("msm-rand")
    twostep = harness.EstimatorSpec(label="2S", engine="parametric-2S", design="2S")
    with pytest.raises(ValidationError):
        harness.validate_estimator(twostep, msm)


# ---------------------------------------------------------------------------
# run_replicates


def test_run_replicates_rejects_zero_R():
    est = harness.EstimatorSpec(label="2S", engine="parametric-2S", design="2S")
    with pytest.raises(ValidationError):
        harness.run_replicates("ex1-normal", [est], [100], 0, master_seed=1)


def test_cell_aborts_after_three_consecutive_failures(monkeypatch, capsys):
    def explode(est, dataset, rng):
        raise SingularDesignError("forced failure")
    monkeypatch.setattr(harness, "run_estimator", explode)
    est = harness.EstimatorSpec(label="2S", engine="parametric-2S", design="2S",
                                L=50)
    res = harness.run_replicates("ex1-normal", [est], [60], 8, master_seed=1)
    row = res.rows[0]
    assert row.R == 0
    assert np.isnan(row.bias) and np.isnan(row.rmse) and np.isnan(row.coverage)
    assert "aborted after 3 consecutive" in capsys.readouterr().err
    assert ("ex1-normal", "2S", 60) in res.failures


def test_isolated_failure_dropped_and_reported(monkeypatch, capsys):
    real = harness._one_replicate

    def flaky(scenario_name, est, n, master_seed, rep, params):
        if rep == 1:
            raise SingularDesignError("replicate 1 forced down")
        return real(scenario_name, est, n, master_seed, rep, params)

    monkeypatch.setattr(harness, "_one_replicate", flaky)
    est = harness.EstimatorSpec(label="2S", engine="parametric-2S", design="2S",
                                L=100)
    res = harness.run_replicates("ex1-normal", [est], [80], 5, master_seed=2)
    row = res.rows[0]
    assert row.R == 4
    assert np.isfinite(row.bias)
    fails = res.failures[("ex1-normal", "2S", 80)]
    assert len(fails) == 1 and fails[0][0] == 1
    assert "unreliable" in capsys.readouterr().err
    reps = [r for r, _, _, _ in res.records[("ex1-normal", "2S", 80, "ate")]]
    assert reps == [0, 2, 3, 4]


def row_key(row):
    return (row.scenario, row.estimator, row.n, row.R, row.bias, row.sd,
            row.rmse, row.coverage, row.flagged_draws)


def test_worker_count_does_not_change_results():
    ests = [harness.EstimatorSpec(label="2S", engine="parametric-2S",
                                  design="2S", L=200),
            harness.EstimatorSpec(label="CF", engine="parametric-CF",
                                  design="CF", L=200)]
    serial = harness.run_replicates("ex1-normal", ests, [120], 4, master_seed=9,
                                    workers=1)
    parallel = harness.run_replicates("ex1-normal", ests, [120], 4, master_seed=9,
                                      workers=2)
    assert [row_key(r) for r in serial.rows] == [row_key(r) for r in parallel.rows]
    assert serial.records == parallel.records


def test_two_seed_blocks_agree_within_monte_carlo_error():
    est = harness.EstimatorSpec(label="2S", engine="parametric-2S", design="2S",
                                L=300)
    r1 = harness.run_replicates("appB-normal-z", [est], [100], 30, master_seed=21)
    r2 = harness.run_replicates("appB-normal-z", [est], [100], 30, master_seed=22)
    a, b = r1.rows[0], r2.rows[0]
    se = np.sqrt(a.sd ** 2 / a.R + b.sd ** 2 / b.R)
    assert abs(a.bias - b.bias) < 3 * se


# ---------------------------------------------------------------------------
# CSV surfaces


def test_metrics_csv_round_trip(tmp_path):
    est = harness.EstimatorSpec(label="2S", engine="parametric-2S", design="2S",
                                L=100)
    res = harness.run_replicates("ex1-normal", [est], [80, 120], 3, master_seed=4)
    path = tmp_path / "metrics.csv"
    harness.write_metrics_csv(res.rows, path)
    with open(path, newline="") as fh:
        got = list(csv.reader(fh))
    assert tuple(got[0]) == harness.METRICS_HEADER
    assert len(got) == 1 + len(res.rows)
    for line, row in zip(got[1:], res.rows):
        assert line[0] == row.scenario and line[1] == row.estimator
        assert int(line[2]) == row.n and int(line[3]) == row.R
        assert float(line[4]) == row.bias
        assert float(line[7]) == row.coverage
        assert int(line[8]) == row.flagged_draws


def test_records_csv_round_trip(tmp_path):
    est = harness.EstimatorSpec(label="2S", engine="parametric-2S", design="2S",
                                L=100)
    res = harness.run_replicates("ex1-normal", [est], [80], 3, master_seed=4)
    path = tmp_path / "records.csv"
    harness.write_records_csv(res, path)
    with open(path, newline="") as fh:
        got = list(csv.reader(fh))
    assert got[0] == ["scenario", "estimator", "n", "param", "replicate",
                      "point", "ci_lo", "ci_hi"]
    recs = res.records[("ex1-normal", "2S", 80, "ate")]
    assert len(got) == 1 + len(recs)
    for line, (rep, point, lo, hi) in zip(got[1:], recs):
        assert int(line[4]) == rep
        assert float(line[5]) == point and float(line[6]) == lo


def test_msm_rows_expand_per_cell_parameter(tmp_path):
    est = harness.EstimatorSpec(label="MSM", engine="bb-msm", L=50)
    res = harness.run_replicates("msm-rand", [est], [500], 2, master_seed=6)
    labels = [r.estimator for r in res.rows]
    assert labels == ["MSM[ey00]", "MSM[ey10]", "MSM[ey01]", "MSM[ey11]"]
    assert all(np.isfinite(r.bias) for r in res.rows)


# ---------------------------------------------------------------------------
# Balance diagnostic


@pytest.fixture(scope="module")
def balance_data():
    rng = np.random.default_rng(3)
    n = 20000
    x = rng.standard_normal((n, 2))
    lin = x[:, 0] + x[:, 1]
    z = (rng.random(n) < numopt.expit(lin)).astype(float)
    y = rng.standard_normal(n)
    ds = dgp.Dataset(x=x, z=z, y=y, scenario="ex2-rand", seed=0)
    zr = (rng.random(n) < 0.5).astype(float)
    dsr = dgp.Dataset(x=x, z=zr, y=y, scenario="ex2-rand", seed=0)
    return ds, dsr, lin


def test_balance_correct_score_is_clean(balance_data):
    ds, _, lin = balance_data
    rows = harness.balance_diagnostic(ds, numopt.expit(lin))
    assert [r.covariate for r in rows] == ["x1", "x2"]
    assert all(abs(r.coef) < 0.1 for r in rows)
    assert all(r.se > 0 for r in rows)


def test_balance_wrong_score_is_flagged(balance_data):
    ds, _, _ = balance_data
    bad = numopt.expit(2.0 * ds.x[:, 0] + 0.5 * ds.x[:, 1])
    rows = harness.balance_diagnostic(ds, bad)
    assert max(abs(r.coef) for r in rows) > 0.2


def test_balance_randomized_treatment_is_clean(balance_data):
    _, dsr, _ = balance_data
    cand = numopt.expit(0.7 * dsr.x[:, 0] - 0.4 * dsr.x[:, 1])
    rows = harness.balance_diagnostic(dsr, cand)
    assert all(abs(r.coef) < 0.1 for r in rows)


def test_balance_strata_mode(balance_data):
    ds, _, lin = balance_data
    good = harness.balance_diagnostic(ds, numopt.expit(lin), n_strata=10)
    assert all(abs(r.coef) < 0.1 for r in good)
    bad = harness.balance_diagnostic(
        ds, numopt.expit(2.0 * ds.x[:, 0] + 0.5 * ds.x[:, 1]), n_strata=10)
    assert max(abs(r.coef) for r in bad) > 0.2


def test_balance_rejects_bad_input(balance_data):
    ds, _, lin = balance_data
    cont = dgp.Dataset(x=ds.x, z=ds.y, y=ds.y, scenario="ex2-rand", seed=0)
    with pytest.raises(ValueError):
        harness.balance_diagnostic(cont, numopt.expit(lin))
    with pytest.raises(ValueError):
        harness.balance_diagnostic(ds, numopt.expit(lin)[:100])
    with pytest.raises(ValueError):
        harness.balance_diagnostic(ds, numopt.expit(lin), n_strata=1)
