"""Replication driver: runs estimators over replicate datasets and scores them.

A cell is one (scenario, estimator, n) combination.  Each replicate gets its
own derived data and inference streams, so cells are independently re-runnable
and results do not depend on worker scheduling.
"""

from __future__ import annotations

import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence, Union

import numpy as np

from . import bboot, dgp, numopt, posterior, streams
from .bboot import CaseWeightRule
from .dgp import Dataset, ScenarioSpec
from .errors import CausalbbError, ValidationError

ENGINES = (
    "parametric-JT", "parametric-CF", "parametric-2S",
    "bb-two-step", "bb-cut-feedback", "bb-ipw", "bb-att",
    "bb-dr-poisson", "bb-msm",
)

_DESIGN_ENGINES = ("parametric-JT", "parametric-CF", "parametric-2S",
                   "bb-two-step", "bb-cut-feedback")

METRICS_HEADER = ("scenario", "estimator", "n", "R", "bias", "sd", "rmse",
                  "coverage", "flagged_draws", "wall_time")


@dataclass(frozen=True)
class EstimatorSpec:
    """One estimator configuration: an engine plus its knobs."""

    label: str
    engine: str
    design: Optional[str] = None
    gamma_source: Optional[str] = None
    linked: bool = True
    L: int = 1000
    prior_sd: float = 10.0
    truncation: Optional[float] = None

    def __post_init__(self):
        if self.engine not in ENGINES:
            raise ValidationError(f"unknown engine {self.engine!r}")
        if self.L < 1:
            raise ValidationError("L must be at least 1")


@dataclass
class MetricsRow:
    scenario: str
    estimator: str
    n: int
    R: int
    bias: float
    sd: float
    rmse: float
    coverage: float
    flagged_draws: int
    wall_time: float

    def csv_values(self) -> tuple:
        return (self.scenario, self.estimator, self.n, self.R, self.bias,
                self.sd, self.rmse, self.coverage, self.flagged_draws,
                self.wall_time)


@dataclass
class RunResult:
    """Metrics rows plus the per-replicate record behind them."""

    rows: list = field(default_factory=list)
    # (scenario, estimator label, n, param) -> list of (replicate, point, lo, hi)
    records: dict = field(default_factory=dict)
    # (scenario, estimator label, n) -> list of (replicate, message)
    failures: dict = field(default_factory=dict)

    def __iter__(self):
        return iter(self.rows)

    def __len__(self):
        return len(self.rows)


def summarize_draws(draws: posterior.PosteriorDraws, param: str):
    """Posterior point estimate and equal-tailed 95% credible interval.

    The interval is the empirical 2.5 and 97.5 percentiles of the draws with
    linear interpolation between order statistics.
    """
    col = draws.column(param)
    lo, hi = np.percentile(col, [2.5, 97.5])
    return float(col.mean()), (float(lo), float(hi))


def compute_metrics(points: Sequence[float], cis: Sequence[tuple], truth: float):
    """Bias, population sd, RMSE, and closed-interval coverage percentage."""
    pts = np.asarray(points, dtype=float)
    if pts.size < 1 or len(cis) != pts.size:
        raise ValueError("need equally many points and intervals, at least one")
    bias = float(pts.mean() - truth)
    sd = float(np.sqrt(np.mean((pts - pts.mean()) ** 2)))
    rmse = float(np.sqrt(np.mean((pts - truth) ** 2)))
    covered = sum(1 for lo, hi in cis if lo <= truth <= hi)
    coverage = 100.0 * covered / pts.size
    return {"bias": bias, "sd": sd, "rmse": rmse, "coverage": coverage}


def target_params(spec: ScenarioSpec) -> list[tuple[str, float]]:
    """The draw columns scored against the scenario's true estimand."""
    kind = spec.estimand[0]
    truth = dgp.true_estimand(spec)
    if kind == "cells":
        names = ("ey00", "ey10", "ey01", "ey11")
        return list(zip(names, [float(v) for v in np.asarray(truth)]))
    name = {"ate": "ate", "att": "att", "psi": "psi"}[kind]
    return [(name, float(truth))]


# engines whose target is not the ATE
_TARGET_KINDS = {"bb-att": "att", "bb-msm": "cells", "bb-dr-poisson": "psi"}


def validate_estimator(est: EstimatorSpec, spec: ScenarioSpec) -> None:
    """Reject incompatible engine/scenario pairs before any replicate runs."""
    want = _TARGET_KINDS.get(est.engine, "ate")
    if spec.estimand[0] != want:
        raise ValidationError(
            f"estimator {est.label!r}: {est.engine} targets {want!r} but "
            f"scenario {spec.name} registers a {spec.estimand[0]!r} estimand")
    if est.engine in _DESIGN_ENGINES:
        if est.design is None:
            raise ValidationError(f"estimator {est.label!r} needs an outcome design")
        if spec.treatment[0] == "two-stage":
            raise ValidationError(f"{est.engine} does not run two-stage scenarios")
        try:
            design = posterior.outcome_design(est.design, spec)
        except ValueError as exc:
            raise ValidationError(str(exc)) from None
        if est.engine == "parametric-JT" and design.tag not in ("JT", "JT-ext"):
            raise ValidationError("parametric-JT runs the JT or JT-ext design")
        if est.engine in ("parametric-CF", "bb-cut-feedback") \
                and not design.uses_score:
            raise ValidationError(f"{est.engine} needs a score-using design")
        if design.uses_score:
            posterior.treat_model(spec)
    elif est.engine == "bb-msm":
        if spec.treatment[0] != "two-stage":
            raise ValidationError("bb-msm needs a two-stage sequential scenario")
    elif est.engine == "bb-dr-poisson":
        if spec.outcome[0] != "poisson":
            raise ValidationError("bb-dr-poisson needs a Poisson-outcome scenario")
    else:  # bb-ipw, bb-att
        if spec.treatment[0] != "logistic":
            raise ValidationError(f"{est.engine} needs a binary-treatment scenario")


def run_estimator(est: EstimatorSpec, dataset: Dataset,
                  rng: np.random.Generator) -> posterior.PosteriorDraws:
    """Dispatch one replicate's inference for an estimator spec."""
    eng = est.engine
    tm = None
    if est.prior_sd != 10.0 and eng != "bb-msm":
        spec = dgp.get_scenario(dataset.scenario)
        if spec.treatment[0] != "two-stage":
            tm = replace(posterior.treat_model(spec), prior_sd=est.prior_sd)
    if eng == "parametric-2S":
        return posterior.two_step_draws(dataset, est.design, est.L, rng, treat=tm)
    if eng == "parametric-CF":
        return posterior.cut_feedback_draws(dataset, est.design, est.L, rng,
                                            treat=tm)
    if eng == "parametric-JT":
        return posterior.joint_gibbs(dataset, est.design, est.L, rng, treat=tm)
    if eng == "bb-two-step":
        return bboot.bb_two_step(dataset, est.design, tm, est.linked, est.L,
                                 rng, gamma_source=est.gamma_source)
    if eng == "bb-cut-feedback":
        return bboot.bb_cut_feedback(dataset, est.design, tm,
                                     est.gamma_source or "parametric-posterior",
                                     est.L, rng)
    if eng == "bb-ipw":
        rule = CaseWeightRule(kind="IPW", truncation=est.truncation)
        return bboot.bb_ipw(dataset, tm, rule, est.L, rng)
    if eng == "bb-att":
        return bboot.bb_att(dataset, tm, est.L, rng, truncation=est.truncation)
    if eng == "bb-dr-poisson":
        return bboot.bb_dr_poisson(dataset, None, tm, est.L, rng)
    if eng == "bb-msm":
        return bboot.bb_msm(dataset, est.L, rng, truncation=est.truncation)
    raise ValidationError(f"unknown engine {eng!r}")


def _one_replicate(scenario_name: str, est: EstimatorSpec, n: int,
                   master_seed: int, rep: int, params: Sequence[str]):
    """Worker body: returns (rep, {param: (point, lo, hi)}, flagged) or raises."""
    data_seed = streams.replicate_seed(master_seed, rep)
    dataset = dgp.generate_dataset(scenario_name, n, data_seed)
    rng = streams.inference_stream(master_seed, scenario_name, est.label, n, rep)
    draws = run_estimator(est, dataset, rng)
    out = {}
    for param in params:
        point, (lo, hi) = summarize_draws(draws, param)
        out[param] = (point, lo, hi)
    flagged = int(draws.meta.get("flagged_draws", 0))
    return rep, out, flagged


def run_replicates(scenario: Union[str, ScenarioSpec],
                   estimators: Sequence[EstimatorSpec], n_list: Sequence[int],
                   R: int, master_seed: int, workers: int = 1) -> RunResult:
    """R replicates of every (estimator, n) cell; metrics against the truth.

    Replicate outcomes depend only on (master_seed, scenario, estimator label,
    n, replicate index), so any worker count produces the same rows.  A cell
    aborts after 3 consecutive replicate failures; isolated failures are
    dropped from the metrics and reported, and a cell losing more than 1% of
    its replicates is flagged unreliable on stderr.
    """
    spec = dgp.resolve(scenario)
    if R < 1:
        raise ValidationError("R must be at least 1")
    for est in estimators:
        validate_estimator(est, spec)
    targets = target_params(spec)
    params = [p for p, _ in targets]
    result = RunResult()

    for est in estimators:
        for n in n_list:
            t0 = time.monotonic()
            outcomes, failures, aborted = _run_cell(spec.name, est, n, R,
                                                    master_seed, params, workers)
            wall = time.monotonic() - t0
            _emit_cell(result, spec, est, n, R, outcomes, failures, wall,
                       targets, aborted)
    return result


def _run_cell(scenario_name: str, est: EstimatorSpec, n: int, R: int,
              master_seed: int, params: Sequence[str], workers: int):
    """Execute one cell's replicates; failure decisions follow replicate order.

    Returns (outcomes: rep -> (per-param results, flagged), failures, aborted).
    The parallel path consumes futures in replicate order so the abort decision
    is identical to the serial one.
    """
    outcomes: dict[int, tuple] = {}
    failures: list[tuple[int, str]] = []
    aborted = False
    streak = 0

    def record(rep, value, exc):
        nonlocal streak, aborted
        if exc is None:
            _, out, flagged = value
            outcomes[rep] = (out, flagged)
            streak = 0
            return False
        failures.append((rep, f"{type(exc).__name__}: {exc}"))
        streak += 1
        if streak >= 3:
            aborted = True
            return True
        return False

    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futs = [pool.submit(_one_replicate, scenario_name, est, n,
                                master_seed, rep, tuple(params))
                    for rep in range(R)]
            for rep, fut in enumerate(futs):
                try:
                    value, exc = fut.result(), None
                except CausalbbError as e:
                    value, exc = None, e
                if record(rep, value, exc):
                    for later in futs[rep + 1:]:
                        later.cancel()
                    break
    else:
        for rep in range(R):
            try:
                value, exc = _one_replicate(scenario_name, est, n, master_seed,
                                            rep, tuple(params)), None
            except CausalbbError as e:
                value, exc = None, e
            if record(rep, value, exc):
                break
    return outcomes, failures, aborted


def _emit_cell(result: RunResult, spec: ScenarioSpec, est: EstimatorSpec,
               n: int, R: int, outcomes: dict, failures: list, wall: float,
               targets: list, aborted: bool) -> None:
    key_base = (spec.name, est.label, n)
    if failures:
        result.failures[key_base] = list(failures)
    succ = sorted(outcomes)
    flagged_total = sum(outcomes[r][1] for r in succ)
    multi = len(targets) > 1
    for param, truth in targets:
        label = f"{est.label}[{param}]" if multi else est.label
        recs = [(r,) + outcomes[r][0][param] for r in succ]
        result.records[key_base + (param,)] = recs
        if aborted or not succ:
            row = MetricsRow(spec.name, label, n, len(succ), float("nan"),
                             float("nan"), float("nan"), float("nan"),
                             flagged_total, wall)
        else:
            points = [p for _, p, _, _ in recs]
            cis = [(lo, hi) for _, _, lo, hi in recs]
            met = compute_metrics(points, cis, truth)
            row = MetricsRow(spec.name, label, n, len(succ), met["bias"],
                             met["sd"], met["rmse"], met["coverage"],
                             flagged_total, wall)
        result.rows.append(row)
    if aborted:
        print(f"warning: cell {key_base} aborted after 3 consecutive "
              f"replicate failures", file=sys.stderr)
    elif failures and len(failures) > 0.01 * R:
        print(f"warning: cell {key_base} is unreliable: {len(failures)} of "
              f"{R} replicates failed", file=sys.stderr)


def write_metrics_csv(rows: Sequence[MetricsRow], path) -> None:
    """The delimited metrics surface: one row per cell and target parameter."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(METRICS_HEADER) + "\n")
        for row in rows:
            vals = []
            for v in row.csv_values():
                vals.append(repr(float(v)) if isinstance(v, float) else str(v))
            fh.write(",".join(vals) + "\n")


def write_records_csv(result: RunResult, path) -> None:
    """Per-replicate points and intervals for every cell, in a stable order."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("scenario,estimator,n,param,replicate,point,ci_lo,ci_hi\n")
        for key in sorted(result.records):
            scenario, label, n, param = key
            for rep, point, lo, hi in result.records[key]:
                fh.write(f"{scenario},{label},{n},{param},{rep},"
                         f"{point!r},{lo!r},{hi!r}\n")


# ---------------------------------------------------------------------------
# Balance diagnostic


@dataclass(frozen=True)
class BalanceRow:
    covariate: str
    coef: float
    se: float


def balance_diagnostic(dataset: Dataset, score_values: np.ndarray,
                       n_strata: Optional[int] = None) -> list[BalanceRow]:
    """Covariate balance conditional on a candidate score.

    Regression mode (default): for each covariate, an unweighted logistic fit
    of z on (intercept, logit of score, that covariate); a near-zero covariate
    coefficient means the covariate carries no treatment information beyond
    the score.  The covariates are tested one at a time because a correctly
    specified score is an exact function of them, so entering the whole block
    alongside the score would be perfectly collinear.

    Strata mode (n_strata given): score-quantile strata; reports the
    stratum-size-weighted standardized mean difference per covariate (se is
    the pooled standard error of that difference).
    """
    z = dataset.z if dataset.z.ndim == 1 else dataset.z[:, 0]
    uniq = np.unique(z)
    if not np.all(np.isin(uniq, (0.0, 1.0))) or uniq.size < 2:
        raise ValueError("balance diagnostic needs a binary treatment with both arms")
    b = np.clip(np.asarray(score_values, dtype=float), 1e-12, 1 - 1e-12)
    if b.shape != (dataset.n,):
        raise ValueError("score_values must have one value per row")
    p = dataset.x.shape[1]

    if n_strata is None:
        logit_b = np.log(b / (1.0 - b))
        out = []
        ones = np.ones(dataset.n)
        for j in range(p):
            design = np.column_stack([ones, logit_b, dataset.x[:, j]])
            fit = numopt.wlogit_fit(design, z, ones / dataset.n)
            pr = numopt.expit(design @ fit.coef)
            fisher = (design * (pr * (1 - pr))[:, None]).T @ design
            cov = np.linalg.inv(fisher)
            out.append(BalanceRow(covariate=f"x{j + 1}",
                                  coef=float(fit.coef[2]),
                                  se=float(np.sqrt(cov[2, 2]))))
        return out

    if n_strata < 2:
        raise ValueError("need at least 2 strata")
    edges = np.quantile(b, np.linspace(0, 1, n_strata + 1))
    stratum = np.clip(np.searchsorted(edges[1:-1], b, side="right"), 0, n_strata - 1)
    out = []
    for j in range(p):
        xj = dataset.x[:, j]
        num = 0.0
        var = 0.0
        used = 0
        for s in range(n_strata):
            m = stratum == s
            zt = m & (z == 1)
            zc = m & (z == 0)
            if zt.sum() < 2 or zc.sum() < 2:
                continue
            pool = np.sqrt(0.5 * (xj[zt].var(ddof=1) + xj[zc].var(ddof=1)))
            if pool <= 0:
                continue
            dmean = (xj[zt].mean() - xj[zc].mean()) / pool
            wgt = m.sum()
            num += wgt * dmean
            var += wgt**2 * (1.0 / zt.sum() + 1.0 / zc.sum())
            used += wgt
        if used == 0:
            raise ValueError("no stratum had both arms populated")
        out.append(BalanceRow(covariate=f"x{j + 1}", coef=num / used,
                              se=float(np.sqrt(var)) / used))
    return out
