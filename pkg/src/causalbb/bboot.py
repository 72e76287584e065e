"""Dirichlet-weight Bayesian-bootstrap inference engines.

Each draw reweights the sample with a flat-Dirichlet vector and re-solves the
estimation problem; the collection of L solutions is treated as a posterior
sample.  Linked estimators push a single weight draw through both the exposure
and outcome stages; unlinked variants give each stage its own draw.

The per-draw solves honor the numopt contracts exactly, but the fits are
batched across draws (shared Gram cross-products, stacked solves, masked
Newton steps) so that large L runs at matrix speed; draws the batched path
cannot handle are re-run through the scalar numopt routines, which are
authoritative.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Union

import numpy as np

from . import dgp, numopt, posterior
from .dgp import Dataset
from .errors import (
    CausalbbError,
    ExtremePropensityError,
    NonPositiveOutcomeError,
    SingularDesignError,
)
from .numopt import COND_LIMIT, RIDGE_REL
from .posterior import OutcomeDesign, PosteriorDraws, TreatModel

_F2_FLOOR = 1e-6
_MAX_RESAMPLE = 3

GAMMA_SOURCES = (
    "linked", "unlinked-BB", "parametric-posterior", "parametric-point",
    "unlinked-point", "true", "none",
)


@dataclass(frozen=True)
class CaseWeightRule:
    """How fitted propensities become per-unit case weights.

    truncation, when set, is an upper clamp applied to 1/f2 (and to the
    b/(1-b) odds for ATT); when it is None an observation with fitted density
    below 1e-6 raises ExtremePropensityError instead.
    """

    kind: str = "none"
    truncation: Optional[float] = None

    def __post_init__(self):
        if self.kind not in ("none", "IPW", "ATT", "MSM-sequential"):
            raise ValueError(f"unknown case-weight kind {self.kind!r}")
        if self.truncation is not None and not self.truncation > 0:
            raise ValueError("truncation must be positive when given")


@dataclass
class LossSpec:
    """A weighted-loss problem for the generic bb_minimize engine.

    kind selects the solver: "squared-error" and "case-weighted-loglik" run
    weighted least squares of response on design (the latter after converting
    fitted propensities to case weights via case_weight_rule), "logistic" runs
    a weighted logistic fit, and "score" solves an estimating equation built
    per draw by score_builder(dataset, weights) -> (score_fn, init).

    treat, when given, is the exposure factor (fit per draw; linkage decides
    whether it shares the outcome stage's weight draw).  penalty is a ridge
    coefficient on the main factor (a proper-prior hook; default none).
    """

    kind: str
    design: Optional[np.ndarray] = None
    response: Optional[np.ndarray] = None
    score_builder: Optional[Callable] = None
    treat: Optional[TreatModel] = None
    case_weight_rule: Optional[CaseWeightRule] = None
    linkage: str = "linked"
    penalty: float = 0.0
    names: Optional[tuple[str, ...]] = None

    def __post_init__(self):
        if self.kind not in ("squared-error", "logistic",
                             "case-weighted-loglik", "score"):
            raise ValueError(f"unknown loss kind {self.kind!r}")
        if self.linkage not in ("linked", "unlinked"):
            raise ValueError("linkage must be linked or unlinked")
        if self.kind == "score" and self.score_builder is None:
            raise ValueError("score losses need a score_builder")
        if self.kind != "score" and self.design is None:
            raise ValueError(f"{self.kind} losses need a design matrix")


def default_weight_draws(L: int, n: int, rng: np.random.Generator) -> np.ndarray:
    """L flat-Dirichlet weight rows, one per draw."""
    e = rng.standard_exponential((L, n))
    return e / e.sum(axis=1, keepdims=True)


def _check_weight_matrix(w, L, n):
    w = np.asarray(w, dtype=float)
    if w.shape != (L, n):
        raise ValueError(f"weight matrix has shape {w.shape}, expected ({L}, {n})")
    if not np.all(np.isfinite(w)) or np.any(w < 0):
        raise ValueError("weights must be finite and nonnegative")
    if np.any(w.sum(axis=1) <= 0):
        raise ValueError("every weight row must have positive sum")
    return w


# ---------------------------------------------------------------------------
# Batched fits


def _batch_wls(fixed: np.ndarray, varying: Sequence[np.ndarray],
               w: np.ndarray, y: np.ndarray):
    """Weighted least squares for every weight row at once.

    fixed is (n, k); each entry of varying is an (n, L) per-draw column.
    Returns (coefs (L, k+m) in fixed-then-varying order, ridged flags,
    failed flags).  Ridging matches numopt.wls_fit: condition above COND_LIMIT
    adds RIDGE_REL * trace/d to the diagonal once; still-hopeless draws are
    flagged failed instead of raising.
    """
    L, n = w.shape
    k = fixed.shape[1]
    m = len(varying)
    d = k + m

    pairs = [(i, j) for i in range(k) for j in range(i, k)]
    prod = np.empty((n, len(pairs)))
    for c, (i, j) in enumerate(pairs):
        prod[:, c] = fixed[:, i] * fixed[:, j]
    gflat = w @ prod
    g = np.empty((L, d, d))
    for c, (i, j) in enumerate(pairs):
        g[:, i, j] = gflat[:, c]
        g[:, j, i] = gflat[:, c]

    wy = w * y[None, :]
    rhs = np.empty((L, d))
    rhs[:, :k] = wy @ fixed
    wb = []
    for a, col in enumerate(varying):
        wba = w * col.T
        wb.append(wba)
        cross = wba @ fixed
        g[:, :k, k + a] = cross
        g[:, k + a, :k] = cross
        rhs[:, k + a] = wba @ y
    for a in range(m):
        for b in range(a, m):
            val = np.einsum("ln,nl->l", wb[a], varying[b])
            g[:, k + a, k + b] = val
            g[:, k + b, k + a] = val

    ev = np.linalg.eigvalsh(g)
    with np.errstate(divide="ignore", invalid="ignore"):
        cond = np.where(ev[:, 0] > 0, ev[:, -1] / ev[:, 0], np.inf)
    ridged = cond > COND_LIMIT
    if np.any(ridged):
        tr = np.einsum("ldd->l", g[ridged])
        g[ridged] += (RIDGE_REL * tr / d)[:, None, None] * np.eye(d)
        ev2 = np.linalg.eigvalsh(g[ridged])
        with np.errstate(divide="ignore", invalid="ignore"):
            cond2 = np.where(ev2[:, 0] > 0, ev2[:, -1] / ev2[:, 0], np.inf)
        failed = np.zeros(L, dtype=bool)
        failed[np.flatnonzero(ridged)[cond2 > COND_LIMIT]] = True
    else:
        failed = np.zeros(L, dtype=bool)

    if np.any(failed):
        g[failed] = np.eye(d)
    coefs = np.linalg.solve(g, rhs[:, :, None])[:, :, 0]
    coefs[failed] = np.nan
    return coefs, ridged & ~failed, failed


def _batch_wlogit(xmat: np.ndarray, z: np.ndarray, w: np.ndarray,
                  max_iter: int = 100):
    """Weighted logistic fits for every weight row, Newton with step halving.

    Mirrors numopt.wlogit_fit (zero init, score tolerance 1e-10, halving on
    the weighted log likelihood).  Draws the batched path cannot finish are
    re-fit one at a time through numopt.wlogit_fit, whose error semantics are
    authoritative; those exceptions come back in the failures dict.
    """
    L, n = w.shape
    d = xmat.shape[1]
    cap = numopt._LOGIT_CAP
    pairs = [(i, j) for i in range(d) for j in range(i, d)]
    prod = np.empty((n, len(pairs)))
    for c, (i, j) in enumerate(pairs):
        prod[:, c] = xmat[:, i] * xmat[:, j]

    coef = np.zeros((L, d))
    zc = z[None, :]
    ll = -np.log(2.0) * w.sum(axis=1)       # loglik at the zero start
    active = np.arange(L)
    pending: set[int] = set()
    for _ in range(max_iter):
        if active.size == 0:
            break
        ca = coef[active]
        wa = w[active]
        lin = np.clip(ca @ xmat.T, -cap, cap)          # (La, n)
        p = 1.0 / (1.0 + np.exp(-lin))
        grad = (wa * (zc - p)) @ xmat                  # (La, d)
        done = np.linalg.norm(grad, axis=1) <= 1e-10
        if np.any(done):
            # a "converged" perfectly-classified row is separation; route it
            # through the scalar path so the authoritative error is raised
            sep = done & (np.max(np.abs(zc - p), axis=1) < 1e-8)
            if np.any(sep):
                pending.update(int(l) for l in active[sep])
            keep = ~done
            active = active[keep]
            if active.size == 0:
                break
            ca, wa, p, grad = ca[keep], wa[keep], p[keep], grad[keep]
        hflat = (wa * p * (1.0 - p)) @ prod            # (La, pairs)
        h = np.empty((active.size, d, d))
        for c, (i, j) in enumerate(pairs):
            h[:, i, j] = hflat[:, c]
            h[:, j, i] = hflat[:, c]
        step = np.empty_like(grad)
        bad = np.zeros(active.size, dtype=bool)
        try:
            step = np.linalg.solve(h, grad[:, :, None])[:, :, 0]
        except np.linalg.LinAlgError:
            for i in range(active.size):
                try:
                    step[i] = np.linalg.solve(h[i], grad[i])
                except np.linalg.LinAlgError:
                    bad[i] = True
        if np.any(bad):
            pending.update(int(l) for l in active[bad])
            keep = ~bad
            active = active[keep]
            if active.size == 0:
                break
            ca, wa, step = ca[keep], wa[keep], step[keep]
        lla = ll[active]
        alpha = np.ones(active.size)
        improved = np.zeros(active.size, dtype=bool)
        cand = ca.copy()
        cand_ll = lla.copy()
        for _half in range(50):
            todo = np.flatnonzero(~improved)
            if todo.size == 0:
                break
            trial = ca[todo] + alpha[todo, None] * step[todo]
            lin_t = trial @ xmat.T
            ll_t = np.sum(w[active[todo]] * (zc * lin_t - np.logaddexp(0.0, lin_t)),
                          axis=1)
            better = ll_t > lla[todo]
            good = todo[better]
            cand[good] = trial[better]
            cand_ll[good] = ll_t[better]
            improved[good] = True
            alpha[todo[~better]] *= 0.5
        pending.update(int(l) for l in active[~improved])
        coef[active[improved]] = cand[improved]
        ll[active[improved]] = cand_ll[improved]
        active = active[improved]
    else:
        pending.update(int(l) for l in active)

    failures: dict[int, Exception] = {}
    for l in sorted(pending):
        try:
            coef[l] = numopt.wlogit_fit(xmat, z, w[l]).coef
        except CausalbbError as exc:
            failures[l] = exc
            coef[l] = np.nan
    return coef, failures


# ---------------------------------------------------------------------------
# Gamma sources


def _resolve_design(outcome_design: Union[str, OutcomeDesign],
                    dataset: Dataset) -> OutcomeDesign:
    if isinstance(outcome_design, OutcomeDesign):
        return outcome_design
    return posterior.outcome_design(outcome_design, dataset.scenario)


def _resolve_treat(treat_design: Optional[TreatModel],
                   dataset: Dataset) -> TreatModel:
    if treat_design is not None:
        return treat_design
    return posterior.treat_model(dataset.scenario)


def _canon_gamma_source(source: str) -> str:
    low = source.lower()
    for name in GAMMA_SOURCES:
        if name.lower() == low:
            return name
    raise ValueError(f"unknown gamma source {source!r}")


def _gamma_point(tm: TreatModel, xmat, z, L, rng):
    """Posterior-mean exposure coefficients (no weighting)."""
    if tm.family == "normal":
        gram = xmat.T @ xmat
        return np.linalg.solve(gram, xmat.T @ z)
    chain = posterior.logistic_mh_draws(xmat, z, L, rng, prior_sd=tm.prior_sd)
    return chain.draws.mean(axis=0)


def _gamma_bb_batch(tm: TreatModel, xmat, z, w):
    """Per-draw weighted exposure MLEs; returns (gammas, failures)."""
    if tm.family == "normal":
        coefs, _, failed = _batch_wls(xmat, [], w, z)
        failures = {int(l): SingularDesignError("weighted exposure design is singular")
                    for l in np.flatnonzero(failed)}
        return coefs, failures
    return _batch_wlogit(xmat, z, w)


def _gamma_single(tm: TreatModel, xmat, z, wl):
    if tm.family == "normal":
        return numopt.wls_fit(xmat, z, wl).coef
    return numopt.wlogit_fit(xmat, z, wl).coef


# ---------------------------------------------------------------------------
# Core BB regression engine (two-step and cut-feedback variants)


def _bb_regression(dataset: Dataset, design: OutcomeDesign, tm: Optional[TreatModel],
                   gamma_source: str, L: int, rng: np.random.Generator,
                   weight_draws, engine: str, extra_meta: Optional[dict] = None
                   ) -> PosteriorDraws:
    if L < 1:
        raise ValueError("need at least one draw")
    n = dataset.n
    y = dataset.y
    draw_w = weight_draws if weight_draws is not None else default_weight_draws
    rescue_rng = rng.spawn(1)[0]

    w = _check_weight_matrix(draw_w(L, n, rng), L, n)
    meta = {"engine": engine, "tag": design.tag, "scenario": dataset.scenario,
            "gamma_source": gamma_source, "L": L}
    if extra_meta:
        meta.update(extra_meta)

    gammas = None          # (L, dg) per-draw exposure coefficients
    point_gamma = None     # (dg,) shared plug-in coefficients
    w_exp = None           # weights feeding the exposure stage, when refit per draw
    gamma_failures: dict[int, Exception] = {}

    if design.uses_score:
        if gamma_source == "none":
            raise ValueError(f"design {design.tag} needs a score source")
        xmat = tm.matrix(dataset.x)
        z1 = dataset.z if dataset.z.ndim == 1 else dataset.z[:, 0]
        if gamma_source == "true":
            point_gamma = np.asarray(tm.gamma0)
        elif gamma_source == "linked":
            w_exp = w
            gammas, gamma_failures = _gamma_bb_batch(tm, xmat, z1, w_exp)
        elif gamma_source == "unlinked-BB":
            w_exp = _check_weight_matrix(draw_w(L, n, rng), L, n)
            gammas, gamma_failures = _gamma_bb_batch(tm, xmat, z1, w_exp)
        elif gamma_source == "unlinked-point":
            w_exp2 = _check_weight_matrix(draw_w(L, n, rng), L, n)
            g2, fail2 = _gamma_bb_batch(tm, xmat, z1, w_exp2)
            if fail2:
                raise next(iter(fail2.values()))
            point_gamma = g2.mean(axis=0)
        elif gamma_source == "parametric-posterior":
            if tm.family == "normal":
                gammas, _ = posterior._exposure_conjugate_gamma_draws(
                    tm, xmat, z1, L, rng)
            else:
                chain = posterior.logistic_mh_draws(xmat, z1, L, rng,
                                                    prior_sd=tm.prior_sd)
                gammas = chain.draws
                meta["exposure_acceptance"] = chain.meta["acceptance"]
        elif gamma_source == "parametric-point":
            point_gamma = _gamma_point(tm, xmat, z1, L, rng)
        if point_gamma is not None:
            meta["gamma_hat"] = point_gamma

    # Assemble the outcome design: fixed columns plus any per-draw score columns.
    score_cols = [i for i, _ in design.score_entries]
    fixed_cols = [i for i in range(len(design.columns)) if i not in score_cols]
    if design.uses_score and point_gamma is not None:
        full = design.build(dataset, tm.score_from_linpred(xmat @ point_gamma))
        fixed = full
        varying = []
        order = list(range(len(design.columns)))
    elif design.uses_score:
        base = design.build(dataset, np.zeros(n))
        fixed = base[:, fixed_cols]
        scores = tm.score_from_linpred(xmat @ np.nan_to_num(gammas).T)  # (n, L)
        varying = []
        for _, term in design.score_entries:
            mod = posterior._prod_cols(dataset.x, term)
            varying.append(scores * mod[:, None])
        order = fixed_cols + score_cols
    else:
        fixed = design.build(dataset)
        varying = []
        order = list(range(len(design.columns)))

    coefs_raw, ridged, failed_wls = _batch_wls(fixed, varying, w, y)
    perm = np.argsort(order)
    coefs = coefs_raw[:, perm]

    failed = set(gamma_failures) | set(np.flatnonzero(failed_wls).tolist())
    resampled = 0
    for l in sorted(failed):
        err = gamma_failures.get(l, SingularDesignError("weighted outcome design is singular"))
        ok = False
        for _ in range(_MAX_RESAMPLE):
            resampled += 1
            wl = numopt.draw_dirichlet_weights(n, rescue_rng)
            try:
                if gammas is not None:
                    if w_exp is None:          # parametric-posterior draw kept
                        gl = gammas[l]
                    else:
                        wle = wl if w_exp is w else numopt.draw_dirichlet_weights(
                            n, rescue_rng)
                        gl = _gamma_single(tm, xmat, z1, wle)
                        gammas[l] = gl
                    score_l = tm.score_from_linpred(xmat @ gl)
                    cols = [fixed] + [score_l[:, None] * posterior._prod_cols(
                        dataset.x, term)[:, None] for _, term in design.score_entries]
                    dmat = np.hstack(cols)[:, perm]
                else:
                    dmat = fixed
                fit = numopt.wls_fit(dmat, y, wl)
                coefs[l] = fit.coef
                w[l] = wl
                ok = True
                break
            except CausalbbError as exc:
                err = exc
        if not ok:
            raise err
    meta["flagged_draws"] = int(np.count_nonzero(ridged))
    meta["resampled_draws"] = resampled

    ate = design.ate_draws(coefs, dataset, weights=w)
    draws = np.column_stack([coefs, ate])
    names = design.names + ("ate",)
    return PosteriorDraws(names=names, draws=draws, meta=meta)


def bb_two_step(dataset: Dataset, outcome_design: Union[str, OutcomeDesign],
                treat_design: Optional[TreatModel] = None, linked: bool = True,
                L: int = 1000, rng: Optional[np.random.Generator] = None,
                gamma_source: Optional[str] = None,
                weight_draws=None) -> PosteriorDraws:
    """Two-step Bayesian bootstrap: per-draw exposure fit, then outcome fit.

    With linked=True one weight draw drives both stages; otherwise the
    exposure stage gets an independent draw.  Designs that carry no score
    column skip the exposure stage; PS designs plug in the true coefficients.
    gamma_source overrides the linkage-derived source (accepts any of
    GAMMA_SOURCES, e.g. "parametric-point" for the plug-in comparator).
    """
    if rng is None:
        raise ValueError("rng is required")
    design = _resolve_design(outcome_design, dataset)
    if gamma_source is None:
        if design.tag in posterior.NO_SCORE_TAGS or not design.uses_score:
            gamma_source = "none"
        elif design.tag in posterior.TRUE_SCORE_TAGS:
            gamma_source = "true"
        else:
            gamma_source = "linked" if linked else "unlinked-BB"
    gamma_source = _canon_gamma_source(gamma_source)
    tm = _resolve_treat(treat_design, dataset) if design.uses_score else None
    return _bb_regression(dataset, design, tm, gamma_source, L, rng,
                          weight_draws, engine="bb-two-step",
                          extra_meta={"linked": bool(linked)})


def bb_cut_feedback(dataset: Dataset, outcome_design: Union[str, OutcomeDesign],
                    treat_design: Optional[TreatModel] = None,
                    gamma_source: str = "parametric-posterior",
                    L: int = 1000, rng: Optional[np.random.Generator] = None,
                    weight_draws=None) -> PosteriorDraws:
    """Cut-feedback Bayesian bootstrap: sampled score, weighted outcome fit.

    gamma_source is "parametric-posterior" (exposure posterior draws) or
    "unlinked-BB" (independent-weight exposure refits).
    """
    if rng is None:
        raise ValueError("rng is required")
    gamma_source = _canon_gamma_source(gamma_source)
    if gamma_source not in ("parametric-posterior", "unlinked-BB", "true"):
        raise ValueError(f"cut feedback gamma source must be parametric-posterior "
                         f"or unlinked-BB, not {gamma_source!r}")
    design = _resolve_design(outcome_design, dataset)
    if not design.uses_score:
        raise ValueError(f"cut feedback needs a score-using design, not {design.tag!r}")
    tm = _resolve_treat(treat_design, dataset)
    return _bb_regression(dataset, design, tm, gamma_source, L, rng,
                          weight_draws, engine="bb-cut-feedback")


# ---------------------------------------------------------------------------
# Case-weighted engines: IPW, ATT, MSM


def _observed_density(p: np.ndarray, z: np.ndarray) -> np.ndarray:
    """f2(z|x) for binary z given fitted success probabilities.

    p broadcasts against z, so (L, n) probability blocks and single (n,)
    vectors both work.
    """
    return p * z + (1.0 - p) * (1.0 - z)


def _guard_floor(f2: np.ndarray, truncation: Optional[float], what: str) -> None:
    if truncation is None and np.any(f2 < _F2_FLOOR):
        count = int(np.count_nonzero(f2 < _F2_FLOOR))
        raise ExtremePropensityError(
            f"{count} fitted {what} value(s) below {_F2_FLOOR:g} with truncation off")


def _linked_logit_rescue(xmat, z, w, rescue_rng, n):
    """Batched linked logistic fits with the resample-3 failure contract.

    Returns (gammas, w, resampled count); w rows are replaced for resampled
    draws so downstream stages stay linked.
    """
    gammas, failures = _batch_wlogit(xmat, z, w)
    resampled = 0
    for l in sorted(failures):
        err = failures[l]
        ok = False
        for _ in range(_MAX_RESAMPLE):
            resampled += 1
            wl = numopt.draw_dirichlet_weights(n, rescue_rng)
            try:
                gammas[l] = numopt.wlogit_fit(xmat, z, wl).coef
                w[l] = wl
                ok = True
                break
            except CausalbbError as exc:
                err = exc
        if not ok:
            raise err
    return gammas, w, resampled


def bb_ipw(dataset: Dataset, treat_design: Optional[TreatModel] = None,
           rule: Optional[CaseWeightRule] = None, L: int = 1000,
           rng: Optional[np.random.Generator] = None,
           weight_draws=None) -> PosteriorDraws:
    """Inverse-probability-weighted ATE draws for a binary treatment.

    Per draw: linked weighted logistic fit of the exposure model, case weights
    1/f2(z|x), and the ATE as the difference of combined-weight arm means.
    """
    if rng is None:
        raise ValueError("rng is required")
    rule = rule if rule is not None else CaseWeightRule(kind="IPW")
    if rule.kind != "IPW":
        raise ValueError(f"bb_ipw needs an IPW rule, got {rule.kind!r}")
    tm = _resolve_treat(treat_design, dataset)
    if tm.family != "logistic":
        raise ValueError("bb_ipw needs a binary (logistic) exposure model")
    n = dataset.n
    z = dataset.z
    y = dataset.y
    if z.min() == z.max():
        raise ValueError("both treatment arms must be present")
    draw_w = weight_draws if weight_draws is not None else default_weight_draws
    rescue_rng = rng.spawn(1)[0]
    w = _check_weight_matrix(draw_w(L, n, rng), L, n)

    xmat = tm.matrix(dataset.x)
    gammas, w, resampled = _linked_logit_rescue(xmat, z, w, rescue_rng, n)
    p = numopt.expit(gammas @ xmat.T)        # (L, n)
    f2 = _observed_density(p, z)              # (L, n)
    _guard_floor(f2, rule.truncation, "propensity density")
    case = 1.0 / f2
    if rule.truncation is not None:
        case = np.minimum(case, rule.truncation)
    u = w * case
    ate = (u @ (z * y)) / (u @ z) - (u @ ((1 - z) * y)) / (u @ (1 - z))
    meta = {"engine": "bb-ipw", "scenario": dataset.scenario, "L": L,
            "gamma_source": "linked", "truncation": rule.truncation,
            "flagged_draws": 0, "resampled_draws": resampled}
    return PosteriorDraws(names=("ate",), draws=ate[:, None], meta=meta)


def bb_att(dataset: Dataset, treat_design: Optional[TreatModel] = None,
           L: int = 1000, rng: Optional[np.random.Generator] = None,
           truncation: Optional[float] = None, weight_draws=None) -> PosteriorDraws:
    """Average treatment effect on the treated, by odds reweighting controls.

    Case weights are z + (1-z) b/(1-b); treated units keep weight one while
    controls are tilted toward the treated covariate distribution.
    """
    if rng is None:
        raise ValueError("rng is required")
    tm = _resolve_treat(treat_design, dataset)
    if tm.family != "logistic":
        raise ValueError("bb_att needs a binary (logistic) exposure model")
    n = dataset.n
    z = dataset.z
    y = dataset.y
    if z.min() == z.max():
        raise ValueError("both treatment arms must be present")
    draw_w = weight_draws if weight_draws is not None else default_weight_draws
    rescue_rng = rng.spawn(1)[0]
    w = _check_weight_matrix(draw_w(L, n, rng), L, n)

    xmat = tm.matrix(dataset.x)
    gammas, w, resampled = _linked_logit_rescue(xmat, z, w, rescue_rng, n)
    p = numopt.expit(gammas @ xmat.T)        # (L, n)
    ctrl = z == 0
    _guard_floor((1.0 - p)[:, ctrl], truncation, "control retention probability")
    odds = p / np.maximum(1.0 - p, 1e-300)
    if truncation is not None:
        odds = np.minimum(odds, truncation)
    u_t = w * z[None, :]
    u_c = w * (1 - z)[None, :] * odds
    att = (u_t @ y) / u_t.sum(axis=1) - (u_c @ y) / u_c.sum(axis=1)
    meta = {"engine": "bb-att", "scenario": dataset.scenario, "L": L,
            "gamma_source": "linked", "truncation": truncation,
            "flagged_draws": 0, "resampled_draws": resampled}
    return PosteriorDraws(names=("att",), draws=att[:, None], meta=meta)


def bb_msm(dataset: Dataset, L: int = 1000,
           rng: Optional[np.random.Generator] = None,
           truncation: Optional[float] = None, weight_draws=None) -> PosteriorDraws:
    """Marginal structural model for the two-stage sequential scenario.

    Per draw: weighted logistic fits of z1 | x1 and z2 | x1, z1, x2, case
    weights 1/(f21 f22), and the four treatment-history cell means of y under
    combined weights.  Columns are ey00, ey10, ey01, ey11 with the first index
    the stage-1 treatment.
    """
    if rng is None:
        raise ValueError("rng is required")
    spec = dgp.get_scenario(dataset.scenario)
    if spec.treatment[0] != "two-stage" or dataset.z.ndim != 2:
        raise ValueError("bb_msm needs a two-stage sequential dataset")
    mode = spec.treatment[1]
    n = dataset.n
    x1 = dataset.x[:, 0]
    x2 = dataset.x[:, 1]
    z1 = dataset.z[:, 0]
    z2 = dataset.z[:, 1]
    y = dataset.y
    cells = [(0, 0), (1, 0), (0, 1), (1, 1)]
    masks = [((z1 == a) & (z2 == b)).astype(float) for a, b in cells]
    if any(m.sum() == 0 for m in masks):
        raise ValueError("every treatment-history cell must be populated")

    if mode == "intercept":
        d1 = np.ones((n, 1))
        d2 = np.ones((n, 1))
    else:
        d1 = np.column_stack([np.ones(n), x1])
        d2 = np.column_stack([np.ones(n), x1, z1, x2])

    draw_w = weight_draws if weight_draws is not None else default_weight_draws
    rescue_rng = rng.spawn(1)[0]
    w = _check_weight_matrix(draw_w(L, n, rng), L, n)

    g1, failures1 = _batch_wlogit(d1, z1, w)
    g2, failures2 = _batch_wlogit(d2, z2, w)
    resampled = 0
    for l in sorted(set(failures1) | set(failures2)):
        err = failures1.get(l) or failures2.get(l)
        ok = False
        for _ in range(_MAX_RESAMPLE):
            resampled += 1
            wl = numopt.draw_dirichlet_weights(n, rescue_rng)
            try:
                g1[l] = numopt.wlogit_fit(d1, z1, wl).coef
                g2[l] = numopt.wlogit_fit(d2, z2, wl).coef
                w[l] = wl
                ok = True
                break
            except CausalbbError as exc:
                err = exc
        if not ok:
            raise err

    p1 = numopt.expit(g1 @ d1.T)
    p2 = numopt.expit(g2 @ d2.T)
    f21 = _observed_density(p1, z1)
    f22 = _observed_density(p2, z2)
    _guard_floor(f21, truncation, "stage-1 density")
    _guard_floor(f22, truncation, "stage-2 density")
    case = 1.0 / (f21 * f22)
    if truncation is not None:
        case = np.minimum(case, truncation)
    u = w * case
    draws = np.empty((L, 4))
    for c, mask in enumerate(masks):
        draws[:, c] = (u @ (mask * y)) / (u @ mask)
    meta = {"engine": "bb-msm", "scenario": dataset.scenario, "L": L,
            "mode": mode, "truncation": truncation,
            "flagged_draws": 0, "resampled_draws": resampled}
    return PosteriorDraws(names=("ey00", "ey10", "ey01", "ey11"),
                          draws=draws, meta=meta)


# ---------------------------------------------------------------------------
# Doubly robust Poisson treatment effect


def bb_dr_poisson(dataset: Dataset,
                  outcome_columns: Optional[Sequence[tuple[int, ...]]] = None,
                  treat_design: Optional[TreatModel] = None, L: int = 200,
                  rng: Optional[np.random.Generator] = None,
                  weight_draws=None) -> PosteriorDraws:
    """Doubly robust multiplicative treatment effect for count outcomes.

    Per draw the weighted estimating equation

        sum_i w_i (x_i', z_i - b_i)' exp(-z_i psi) (y_i - exp(x_i beta + z_i psi)) = 0

    is solved for (beta, psi), with b_i the draw's linked weighted-logistic
    propensity fit.  The psi equation is unbiased when either the outcome
    columns or the propensity design is correct, which is the double
    robustness this engine exists for.

    outcome_columns lists confounder product terms (() is the intercept);
    default is the scenario's Poisson base terms.  treat_design overrides the
    scenario exposure model, e.g. to study a deliberately garbled propensity.
    """
    if rng is None:
        raise ValueError("rng is required")
    y = dataset.y
    if np.any(y < 0) or np.any(np.abs(y - np.round(y)) > 1e-8):
        raise NonPositiveOutcomeError(
            "doubly robust Poisson needs nonnegative integer outcomes")
    spec = dgp.get_scenario(dataset.scenario)
    if outcome_columns is None:
        if spec.outcome[0] != "poisson":
            raise ValueError("outcome_columns is required off Poisson scenarios")
        outcome_columns = [t for t, _ in spec.outcome[1]]
    tm = _resolve_treat(treat_design, dataset)
    if tm.family != "logistic":
        raise ValueError("bb_dr_poisson needs a binary (logistic) exposure model")
    n = dataset.n
    z = dataset.z
    omat = np.column_stack([posterior._prod_cols(dataset.x, t)
                            for t in outcome_columns])
    q = omat.shape[1]

    draw_w = weight_draws if weight_draws is not None else default_weight_draws
    rescue_rng = rng.spawn(1)[0]
    w = _check_weight_matrix(draw_w(L, n, rng), L, n)
    xmat = tm.matrix(dataset.x)
    gammas, w, resampled = _linked_logit_rescue(xmat, z, w, rescue_rng, n)
    bmat = numopt.expit(gammas @ xmat.T)      # (L, n)

    def make_score(wl, bl):
        def score(t):
            beta, psi = t[:q], t[q]
            lin = np.clip(omat @ beta + z * psi, None, 500.0)
            resid = wl * np.exp(np.clip(-z * psi, None, 500.0)) * (y - np.exp(lin))
            out = np.empty(q + 1)
            out[:q] = omat.T @ resid
            out[q] = (z - bl) @ resid
            return out
        return score

    init = np.zeros(q + 1)
    if np.all(omat[:, 0] == 1.0):
        init[0] = np.log(max(y.mean(), 1e-8))
    draws = np.empty((L, q + 1))
    warm = init
    for l in range(L):
        err = None
        got = None
        for attempt in range(_MAX_RESAMPLE + 1):
            wl = w[l] if attempt == 0 else numopt.draw_dirichlet_weights(n, rescue_rng)
            bl = bmat[l]
            if attempt > 0:
                resampled += 1
                try:
                    gl = numopt.wlogit_fit(xmat, z, wl).coef
                except CausalbbError as exc:
                    err = exc
                    continue
                bl = numopt.expit(xmat @ gl)
            try:
                got = numopt.solve_estimating_equation(make_score(wl, bl), warm).coef
                break
            except CausalbbError as exc:
                err = exc
                if attempt == 0:
                    # A stale warm start can stall the solve; retry cold first.
                    try:
                        got = numopt.solve_estimating_equation(make_score(wl, bl),
                                                               init).coef
                        break
                    except CausalbbError as exc2:
                        err = exc2
        if got is None:
            raise err
        draws[l] = got
        warm = got

    names = tuple("const" if not t else posterior._term_name(t)
                  for t in outcome_columns) + ("psi",)
    meta = {"engine": "bb-dr-poisson", "scenario": dataset.scenario, "L": L,
            "gamma_source": "linked", "flagged_draws": 0,
            "resampled_draws": resampled}
    return PosteriorDraws(names=names, draws=draws, meta=meta)


# ---------------------------------------------------------------------------
# Generic weighted-loss minimizer


def bb_minimize(dataset: Dataset, loss: LossSpec, L: int = 1000,
                rng: Optional[np.random.Generator] = None,
                weight_draws=None) -> PosteriorDraws:
    """Generic Bayesian bootstrap: per draw, re-solve the weighted loss.

    Every draw is a deterministic transformation of its weight vector(s);
    failed draws are resampled at most 3 times before the error propagates.
    """
    if rng is None:
        raise ValueError("rng is required")
    n = dataset.n
    draw_w = weight_draws if weight_draws is not None else default_weight_draws
    rescue_rng = rng.spawn(1)[0]
    w = _check_weight_matrix(draw_w(L, n, rng), L, n)
    w2 = None
    if loss.treat is not None and loss.linkage == "unlinked":
        w2 = _check_weight_matrix(draw_w(L, n, rng), L, n)

    tmat = loss.treat.matrix(dataset.x) if loss.treat is not None else None
    z1 = dataset.z if dataset.z.ndim == 1 else dataset.z[:, 0]

    def solve_one(wl, wl_exp):
        case = 1.0
        if loss.treat is not None:
            gam = _gamma_single(loss.treat, tmat, z1, wl_exp)
            b = loss.treat.score_from_linpred(tmat @ gam)
            if loss.case_weight_rule is not None:
                rule = loss.case_weight_rule
                if rule.kind == "IPW":
                    f2 = _observed_density(b, z1)
                    _guard_floor(f2[None, :], rule.truncation, "propensity density")
                    case = 1.0 / f2
                    if rule.truncation is not None:
                        case = np.minimum(case, rule.truncation)
                elif rule.kind == "ATT":
                    _guard_floor((1.0 - b)[None, z1 == 0], rule.truncation,
                                 "control retention probability")
                    odds = b / np.maximum(1.0 - b, 1e-300)
                    if rule.truncation is not None:
                        odds = np.minimum(odds, rule.truncation)
                    case = z1 + (1 - z1) * odds
                elif rule.kind != "none":
                    raise ValueError(f"rule {rule.kind!r} is not supported here")
        eff = wl * case
        if loss.kind in ("squared-error", "case-weighted-loglik"):
            if loss.penalty > 0:
                x = loss.design
                gram = (x * eff[:, None]).T @ x + loss.penalty * np.eye(x.shape[1])
                return np.linalg.solve(gram, x.T @ (eff * loss.response))
            return numopt.wls_fit(loss.design, loss.response, eff).coef
        if loss.kind == "logistic":
            return numopt.wlogit_fit(loss.design, loss.response, eff,
                                     ridge=loss.penalty).coef
        score_fn, init = loss.score_builder(dataset, eff)
        return numopt.solve_estimating_equation(score_fn, np.asarray(init, float)).coef

    first = None
    draws = None
    resampled = 0
    for l in range(L):
        err = None
        got = None
        for attempt in range(_MAX_RESAMPLE + 1):
            if attempt == 0:
                wl = w[l]
                wl_exp = w2[l] if w2 is not None else wl
            else:
                resampled += 1
                wl = numopt.draw_dirichlet_weights(n, rescue_rng)
                wl_exp = numopt.draw_dirichlet_weights(n, rescue_rng) \
                    if w2 is not None else wl
            try:
                got = solve_one(wl, wl_exp)
                break
            except CausalbbError as exc:
                err = exc
        if got is None:
            raise err
        if first is None:
            first = np.asarray(got, dtype=float)
            draws = np.empty((L, first.shape[0]))
        draws[l] = got
    names = loss.names if loss.names is not None \
        else tuple(f"t{j}" for j in range(draws.shape[1]))
    meta = {"engine": "bb-minimize", "kind": loss.kind, "scenario": dataset.scenario,
            "L": L, "linkage": loss.linkage, "resampled_draws": resampled,
            "flagged_draws": 0}
    return PosteriorDraws(names=tuple(names), draws=draws, meta=meta)
