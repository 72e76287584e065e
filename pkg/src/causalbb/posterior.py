"""Parametric posterior engines and the regression-design vocabulary.

The estimator menu is expressed as outcome designs: column layouts over an
intercept, raw confounders, a balancing score, and treatment columns
(optionally interacted with effect modifiers).  Engines differ in where the
score comes from: sampled jointly (joint_gibbs), sampled from the exposure
posterior alone (cut_feedback_draws), or plugged in as a point estimate
(two_step_draws).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from . import dgp, numopt
from .dgp import Dataset, ScenarioSpec
from .errors import SingularDesignError, UnknownParameterError

OUTCOME_TAGS = (
    "UN", "UN-ext", "JT", "JT-ext", "CF", "CF-ext",
    "2S", "2S-ext", "Correct", "PS", "PS-ext", "2S-hetero",
)

# Tags whose score column is a point plug-in of the true coefficient vector.
TRUE_SCORE_TAGS = ("PS", "PS-ext")
# Tags that do not involve the exposure model at all.
NO_SCORE_TAGS = ("UN", "UN-ext", "Correct")


@dataclass
class PosteriorDraws:
    """L posterior draws of named parameters plus engine metadata."""

    names: tuple[str, ...]
    draws: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.draws = np.asarray(self.draws, dtype=float)
        if self.draws.ndim != 2:
            raise ValueError("draws must be an (L, d) array")
        if self.draws.shape[1] != len(self.names):
            raise ValueError("names do not match draw columns")
        if self.draws.shape[0] < 1:
            raise ValueError("need at least one draw")
        if not np.all(np.isfinite(self.draws)):
            raise ValueError("draws contain non-finite values")

    @property
    def L(self) -> int:
        return self.draws.shape[0]

    def column(self, name: str) -> np.ndarray:
        try:
            idx = self.names.index(name)
        except ValueError:
            raise UnknownParameterError(name) from None
        return self.draws[:, idx]

    def to_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(",".join(self.names) + "\n")
            for row in self.draws:
                fh.write(",".join(repr(float(v)) for v in row) + "\n")


def _term_name(term: tuple[int, ...]) -> str:
    return ":".join(f"x{j + 1}" for j in term)


def _prod_cols(x: np.ndarray, term: tuple[int, ...]) -> np.ndarray:
    if not term:
        return np.ones(x.shape[0])
    col = x[:, term[0]].copy()
    for j in term[1:]:
        col *= x[:, j]
    return col


@dataclass(frozen=True)
class OutcomeDesign:
    """Column layout for an outcome regression.

    columns is an ordered tuple of (kind, term) with kind in
    {"const", "term", "z", "score"}; term modifies z and score columns
    (treatment-effect modification) and names the confounder product for
    "term" columns.
    """

    tag: str
    scenario: str
    columns: tuple[tuple[str, tuple[int, ...]], ...]

    @property
    def names(self) -> tuple[str, ...]:
        out = []
        for kind, term in self.columns:
            if kind == "const":
                out.append("const")
            elif kind == "term":
                out.append(_term_name(term))
            elif kind == "z":
                out.append("z" if not term else "z:" + _term_name(term))
            else:
                out.append("score" if not term else "score:" + _term_name(term))
        return tuple(out)

    @property
    def uses_score(self) -> bool:
        return any(kind == "score" for kind, _ in self.columns)

    @property
    def score_entries(self) -> tuple[tuple[int, tuple[int, ...]], ...]:
        return tuple((i, term) for i, (kind, term) in enumerate(self.columns)
                     if kind == "score")

    @property
    def z_entries(self) -> tuple[tuple[int, tuple[int, ...]], ...]:
        return tuple((i, term) for i, (kind, term) in enumerate(self.columns)
                     if kind == "z")

    def build(self, dataset: Dataset, score: Optional[np.ndarray] = None) -> np.ndarray:
        if self.uses_score and score is None:
            raise ValueError(f"design {self.tag} needs a score vector")
        n = dataset.n
        d = np.empty((n, len(self.columns)))
        z = dataset.z
        for i, (kind, term) in enumerate(self.columns):
            if kind == "const":
                d[:, i] = 1.0
            elif kind == "term":
                d[:, i] = _prod_cols(dataset.x, term)
            elif kind == "z":
                d[:, i] = z * _prod_cols(dataset.x, term) if term else z
            else:
                d[:, i] = score * _prod_cols(dataset.x, term) if term else score
        return d

    def ate_draws(self, coef_draws: np.ndarray, dataset: Dataset,
                  weights: Optional[np.ndarray] = None) -> np.ndarray:
        """Average treatment effect implied by each draw.

        Sums the z-column coefficients times the (weighted) sample mean of the
        corresponding modifier products.  weights, when given, is an (L, n)
        matrix of per-draw probability weights.
        """
        out = np.zeros(coef_draws.shape[0])
        for pos, term in self.z_entries:
            if not term:
                out += coef_draws[:, pos]
            else:
                m = _prod_cols(dataset.x, term)
                if weights is None:
                    out += coef_draws[:, pos] * m.mean()
                else:
                    out += coef_draws[:, pos] * (weights @ m)
        return out


def outcome_design(tag: str, scenario: Union[str, ScenarioSpec]) -> OutcomeDesign:
    """Resolve an estimator tag to its column layout for a scenario."""
    spec = dgp.resolve(scenario)
    if tag not in OUTCOME_TAGS:
        raise ValueError(f"unknown outcome design tag {tag!r}")
    p = spec.p
    xcols = [("term", (j,)) for j in range(p)]
    cols: list[tuple[str, tuple[int, ...]]]
    if tag == "UN":
        cols = [("const", ()), ("z", ())]
    elif tag == "UN-ext":
        cols = [("const", ()), *xcols, ("z", ())]
    elif tag in ("JT", "CF", "2S", "PS"):
        cols = [("const", ()), ("score", ()), ("z", ())]
    elif tag in ("JT-ext", "CF-ext", "2S-ext", "PS-ext"):
        cols = [("const", ()), *xcols, ("score", ()), ("z", ())]
    elif tag == "Correct":
        if spec.outcome[0] != "normal":
            raise ValueError(f"no Correct design for outcome law {spec.outcome[0]!r}")
        base_terms = [t for t, _ in spec.outcome[1] if t]
        effect_terms = [t for t, _ in spec.outcome[2]]
        cols = [("const", ()), *[("term", t) for t in base_terms],
                *[("z", t) for t in effect_terms]]
    else:  # 2S-hetero
        effect_terms = [t for t, _ in spec.outcome[2]] if spec.outcome[0] == "normal" else [()]
        cols = [("const", ()),
                *[("score", t) for t in effect_terms],
                *[("z", t) for t in effect_terms]]
    return OutcomeDesign(tag=tag, scenario=spec.name, columns=tuple(cols))


@dataclass(frozen=True)
class TreatModel:
    """Exposure model in estimation coordinates.

    terms are the design columns (products of confounders); gamma0 is the true
    coefficient vector expressed in those coordinates.  score_scale picks how a
    linear predictor maps to the balancing score: "mean" (identity, Normal
    exposures), "prob" (expit), or "logit" (identity on the logit scale).
    """

    family: str
    terms: tuple[tuple[int, ...], ...]
    gamma0: tuple[float, ...]
    score_scale: str
    sd: Optional[float] = None
    prior_sd: float = 10.0

    @property
    def names(self) -> tuple[str, ...]:
        return tuple("g:" + (_term_name(t) if t else "1") for t in self.terms)

    def matrix(self, x: np.ndarray) -> np.ndarray:
        return np.column_stack([_prod_cols(x, t) for t in self.terms])

    def score_from_linpred(self, t: np.ndarray) -> np.ndarray:
        if self.score_scale == "prob":
            return numopt.expit(t)
        return t


_EX1_TREAT_TERMS = ((), (0,), (1,), (2,), (0, 1), (0, 2), (1, 2), (0, 1, 2))


def treat_model(scenario: Union[str, ScenarioSpec]) -> TreatModel:
    """Exposure model used by every estimator on this scenario."""
    spec = dgp.resolve(scenario)
    family = spec.treatment[0]
    if family == "two-stage":
        raise ValueError("two-stage scenarios use msm_stage_models")
    if spec.name == "ex1-normal":
        terms = _EX1_TREAT_TERMS
    else:
        terms = ((), *[(j,) for j in range(spec.p)])
    truth = dict(spec.treatment[1])
    missing = [t for t in truth if t not in terms]
    if missing:
        raise ValueError(f"treatment truth terms {missing} not in design for {spec.name}")
    gamma0 = tuple(float(truth.get(t, 0.0)) for t in terms)
    if family == "normal":
        return TreatModel(family="normal", terms=terms, gamma0=gamma0,
                          score_scale="mean", sd=float(spec.treatment[2]))
    scale = "logit" if spec.name == "appB-binary-z" else "prob"
    return TreatModel(family="logistic", terms=terms, gamma0=gamma0, score_scale=scale)


# ---------------------------------------------------------------------------
# Conjugate Normal linear model draws


def _fit_gram(dmat: np.ndarray, y: np.ndarray):
    g = dmat.T @ dmat
    try:
        chol = np.linalg.cholesky(g)
    except np.linalg.LinAlgError:
        raise SingularDesignError("outcome design is rank deficient") from None
    rhs = dmat.T @ y
    betahat = np.linalg.solve(g, rhs)
    rss = float(max(y @ y - betahat @ rhs, 0.0))
    return g, chol, betahat, rss


def linreg_conjugate_draws(design: np.ndarray, y: np.ndarray, L: int,
                           rng: np.random.Generator,
                           names: Optional[tuple[str, ...]] = None) -> PosteriorDraws:
    """Flat-prior Normal linear regression posterior.

    sigma^2 is drawn as RSS over a chi-square with n - d degrees of freedom and
    coefficients as N(OLS, sigma^2 (X'X)^{-1}).  Returns coefficient columns
    plus a trailing "sigma" column (residual sd draws).
    """
    dmat = np.asarray(design, dtype=float)
    y = np.asarray(y, dtype=float)
    n, d = dmat.shape
    if n - d < 1:
        raise ValueError(f"need n > d for conjugate draws (n={n}, d={d})")
    coefs, sigma2 = _conjugate_fixed(dmat, y, L, rng)
    if names is None:
        names = tuple(f"c{j}" for j in range(d))
    draws = np.column_stack([coefs, np.sqrt(sigma2)])
    return PosteriorDraws(names=tuple(names) + ("sigma",), draws=draws,
                          meta={"engine": "linreg-conjugate", "n": n})


def _conjugate_fixed(dmat, y, L, rng):
    n, d = dmat.shape
    _, chol, betahat, rss = _fit_gram(dmat, y)
    chi2 = rng.chisquare(n - d, size=L)
    sigma2 = rss / chi2
    eta = rng.standard_normal((L, d))
    # coef_l = betahat + sigma_l * R^{-T} eta_l with X'X = R R'.
    dev = np.linalg.solve(chol.T, eta.T).T
    coefs = betahat[None, :] + np.sqrt(sigma2)[:, None] * dev
    return coefs, sigma2


def _conjugate_scorecol(fixed: np.ndarray, scores: np.ndarray, y: np.ndarray,
                        pos: int, rng: np.random.Generator):
    """Conjugate draws when one design column varies per draw.

    fixed is (n, k), scores (n, L); the varying column sits at index pos of the
    full design.  One sigma^2 and one coefficient draw per column of scores,
    consuming the stream in the same order as _conjugate_fixed.
    """
    n, k = fixed.shape
    L = scores.shape[1]
    d = k + 1
    if n - d < 1:
        raise ValueError("need n > d for conjugate draws")
    order = [*range(0, pos), *range(pos + 1, d)]

    ftf = fixed.T @ fixed
    fty = fixed.T @ y
    yty = float(y @ y)
    ftb = fixed.T @ scores                      # (k, L)
    bty = scores.T @ y                          # (L,)
    bsq = np.einsum("nl,nl->l", scores, scores)

    g = np.empty((L, d, d))
    rows = np.asarray(order)
    g[:, rows[:, None], rows[None, :]] = ftf
    g[:, rows, pos] = ftb.T
    g[:, pos, rows] = ftb.T
    g[:, pos, pos] = bsq
    rhs = np.empty((L, d))
    rhs[:, rows] = fty
    rhs[:, pos] = bty

    try:
        betahat = np.linalg.solve(g, rhs[:, :, None])[:, :, 0]
        chol = np.linalg.cholesky(g)
    except np.linalg.LinAlgError:
        raise SingularDesignError("score-augmented design is rank deficient") from None
    rss = np.maximum(yty - np.einsum("ld,ld->l", betahat, rhs), 0.0)
    chi2 = rng.chisquare(n - d, size=L)
    sigma2 = rss / chi2
    eta = rng.standard_normal((L, d))
    dev = np.linalg.solve(np.transpose(chol, (0, 2, 1)), eta[:, :, None])[:, :, 0]
    coefs = betahat + np.sqrt(sigma2)[:, None] * dev
    return coefs, sigma2


# ---------------------------------------------------------------------------
# Adaptive random-walk Metropolis for logistic posteriors

_MH_BURN = 2000
_MH_THIN = 5
_ACC_LO, _ACC_HI = 0.2, 0.4


def _logistic_logpost(dmat, z, coef, prior_sd):
    t = dmat @ coef
    ll = float(np.sum(z * t - np.logaddexp(0.0, t)))
    return ll - 0.5 * float(coef @ coef) / prior_sd**2


def logistic_mh_draws(design: np.ndarray, z: np.ndarray, L: int,
                      rng: np.random.Generator, prior_sd: float = 10.0,
                      names: Optional[tuple[str, ...]] = None) -> PosteriorDraws:
    """Random-walk Metropolis draws from a logistic posterior.

    Normal(0, prior_sd^2) priors on every coefficient.  The proposal is scaled
    toward 2.38^2/d times an estimated posterior covariance, with the scalar
    adapted during a 2000-iteration burn-in to keep acceptance in [0.2, 0.4];
    after burn-in the chain is thinned by 5 to exactly L draws.
    """
    dmat = np.asarray(design, dtype=float)
    z = np.asarray(z, dtype=float)
    n, d = dmat.shape

    try:
        start = numopt.wlogit_fit(dmat, z, np.full(n, 1.0 / n),
                                  ridge=1e-8 / prior_sd**2).coef
    except Exception:
        start = np.zeros(d)
    p = numopt.expit(dmat @ start)
    fisher = (dmat * (p * (1 - p))[:, None]).T @ dmat + np.eye(d) / prior_sd**2
    cov = np.linalg.inv(fisher)
    cov_chol = np.linalg.cholesky(cov + 1e-12 * np.eye(d))
    base_scale = 2.38 / math.sqrt(d)

    total = _MH_BURN + _MH_THIN * L
    kept = np.empty((L, d))
    coef = start.copy()
    lp = _logistic_logpost(dmat, z, coef, prior_sd)
    scale = 1.0
    accepted_window = 0
    accepted_main = 0
    k = 0
    for it in range(total):
        prop = coef + (base_scale * scale) * (cov_chol @ rng.standard_normal(d))
        prop_lp = _logistic_logpost(dmat, z, prop, prior_sd)
        if math.log(rng.random()) < prop_lp - lp:
            coef, lp = prop, prop_lp
            accepted_window += 1
            if it >= _MH_BURN:
                accepted_main += 1
        if it < _MH_BURN and (it + 1) % 100 == 0:
            rate = accepted_window / 100.0
            if rate < _ACC_LO:
                scale *= 0.7
            elif rate > _ACC_HI:
                scale *= 1.4
            accepted_window = 0
        elif it >= _MH_BURN:
            if (it - _MH_BURN) % _MH_THIN == _MH_THIN - 1:
                kept[k] = coef
                k += 1
    assert k == L
    if names is None:
        names = tuple(f"g{j}" for j in range(d))
    acc = accepted_main / (_MH_THIN * L)
    return PosteriorDraws(names=tuple(names), draws=kept,
                          meta={"engine": "logistic-mh", "acceptance": acc,
                                "proposal_scale": scale, "n": n})


# ---------------------------------------------------------------------------
# Engine helpers


def _split_rng(rng, exposure_rng, outcome_rng):
    if exposure_rng is None or outcome_rng is None:
        children = rng.spawn(2)
        if exposure_rng is None:
            exposure_rng = children[0]
        if outcome_rng is None:
            outcome_rng = children[1]
    return exposure_rng, outcome_rng


def _exposure_conjugate_gamma_draws(tm: TreatModel, xmat, z, L, rng):
    """Draws from the flat-prior posterior of a Normal exposure model."""
    n, d = xmat.shape
    g, chol, gammahat, rss = _fit_gram(xmat, z)
    chi2 = rng.chisquare(n - d, size=L)
    sig2 = rss / chi2
    eta = rng.standard_normal((L, d))
    dev = np.linalg.solve(chol.T, eta.T).T
    return gammahat[None, :] + np.sqrt(sig2)[:, None] * dev, gammahat


def _finish_regression_draws(design, coefs, sigma2, dataset, meta,
                             weights=None) -> PosteriorDraws:
    ate = design.ate_draws(coefs, dataset, weights=weights)
    draws = np.column_stack([coefs, np.sqrt(sigma2), ate])
    names = design.names + ("sigma", "ate")
    return PosteriorDraws(names=names, draws=draws, meta=meta)


def two_step_draws(dataset: Dataset, tag: str, L: int, rng: np.random.Generator,
                   scenario: Union[str, ScenarioSpec, None] = None,
                   treat: Optional[TreatModel] = None,
                   exposure_rng=None, outcome_rng=None) -> PosteriorDraws:
    """Plug-in posterior: point-estimate score, then conjugate outcome draws.

    The exposure coefficient estimate is the posterior mean (closed form for
    Normal exposures, MH chain mean for logistic ones); PS/PS-ext substitute
    the true coefficient vector, and UN/UN-ext/Correct skip the exposure stage.
    """
    spec = dgp.resolve(scenario if scenario is not None else dataset.scenario)
    design = outcome_design(tag, spec)
    exposure_rng, outcome_rng = _split_rng(rng, exposure_rng, outcome_rng)
    meta = {"engine": "two-step", "tag": tag, "scenario": spec.name}

    score = None
    if design.uses_score:
        tm = treat if treat is not None else treat_model(spec)
        xmat = tm.matrix(dataset.x)
        if tag in TRUE_SCORE_TAGS:
            gamma = np.asarray(tm.gamma0)
        elif tm.family == "normal":
            _, _, gamma, _ = _fit_gram(xmat, dataset.z)
        else:
            chain = logistic_mh_draws(xmat, dataset.z, L, exposure_rng,
                                      prior_sd=tm.prior_sd)
            gamma = chain.draws.mean(axis=0)
            meta["exposure_acceptance"] = chain.meta["acceptance"]
        score = tm.score_from_linpred(xmat @ gamma)
        meta["gamma_hat"] = gamma
    dmat = design.build(dataset, score)
    coefs, sigma2 = _conjugate_fixed(dmat, dataset.y, L, outcome_rng)
    return _finish_regression_draws(design, coefs, sigma2, dataset, meta)


def cut_feedback_draws(dataset: Dataset, tag: str, L: int, rng: np.random.Generator,
                       scenario: Union[str, ScenarioSpec, None] = None,
                       treat: Optional[TreatModel] = None,
                       gamma_draws: Optional[np.ndarray] = None,
                       exposure_rng=None, outcome_rng=None) -> PosteriorDraws:
    """Cut-feedback posterior: exposure posterior draws, one outcome draw each.

    gamma_draws injects a fixed (L, d) matrix of exposure coefficients in place
    of posterior sampling (testing hook; a degenerate injection makes this
    engine coincide with the plug-in two-step path draw for draw).
    """
    spec = dgp.resolve(scenario if scenario is not None else dataset.scenario)
    design = outcome_design(tag, spec)
    if not design.uses_score:
        raise ValueError(f"cut feedback needs a score-using design, not {tag!r}")
    (score_pos, score_term), = design.score_entries
    if score_term:
        raise ValueError("cut feedback supports a single unmodified score column")
    exposure_rng, outcome_rng = _split_rng(rng, exposure_rng, outcome_rng)
    tm = treat if treat is not None else treat_model(spec)
    xmat = tm.matrix(dataset.x)
    meta = {"engine": "cut-feedback", "tag": tag, "scenario": spec.name}

    if gamma_draws is not None:
        gammas = np.asarray(gamma_draws, dtype=float)
        if gammas.shape != (L, xmat.shape[1]):
            raise ValueError("gamma_draws must be (L, d_exposure)")
    elif tm.family == "normal":
        gammas, gamma_hat = _exposure_conjugate_gamma_draws(tm, xmat, dataset.z,
                                                            L, exposure_rng)
        meta["gamma_hat"] = gamma_hat
    else:
        chain = logistic_mh_draws(xmat, dataset.z, L, exposure_rng,
                                  prior_sd=tm.prior_sd)
        gammas = chain.draws
        meta["exposure_acceptance"] = chain.meta["acceptance"]

    scores = tm.score_from_linpred(xmat @ gammas.T)   # (n, L)
    fixed_cols = [i for i in range(len(design.columns)) if i != score_pos]
    fixed = design.build(dataset, score=np.zeros(dataset.n))[:, fixed_cols]
    coefs, sigma2 = _conjugate_scorecol(fixed, scores, dataset.y, score_pos,
                                        outcome_rng)
    return _finish_regression_draws(design, coefs, sigma2, dataset, meta)


def joint_gibbs(dataset: Dataset, tag: str, L: int, rng: np.random.Generator,
                scenario: Union[str, ScenarioSpec, None] = None,
                treat: Optional[TreatModel] = None,
                fix_score_coef: Optional[float] = None) -> PosteriorDraws:
    """Joint posterior over exposure and outcome parameters by Gibbs sampling.

    Alternates a random-walk Metropolis step for the exposure coefficients
    (whose target includes both likelihood factors, because the score enters
    the outcome mean) with blocked conjugate draws of the outcome block, plus
    the exposure variance for Normal exposures.  fix_score_coef pins the score
    coefficient (testing hook: pinning it to 0 detaches the outcome factor, so
    the exposure marginal must match the exposure-only posterior).
    """
    spec = dgp.resolve(scenario if scenario is not None else dataset.scenario)
    if tag not in ("JT", "JT-ext"):
        raise ValueError(f"joint_gibbs expects JT or JT-ext, got {tag!r}")
    design = outcome_design(tag, spec)
    (score_pos, _), = design.score_entries
    tm = treat if treat is not None else treat_model(spec)
    xmat = tm.matrix(dataset.x)
    n, dg = xmat.shape
    y = dataset.y
    z = dataset.z
    d_out = len(design.columns)
    if n - d_out < 1 or n - dg < 1:
        raise ValueError("n too small for joint model")

    # Exposure-only fit provides initialization and the MH proposal shape.
    if tm.family == "normal":
        g_exp, chol_exp, gamma, rss_z = _fit_gram(xmat, z)
        sig2_z = rss_z / max(n - dg, 1)
        prop_cov = sig2_z * np.linalg.inv(g_exp)
        flat_gamma_prior = True
    else:
        try:
            gamma = numopt.wlogit_fit(xmat, z, np.full(n, 1.0 / n),
                                      ridge=1e-8).coef
        except Exception:
            gamma = np.zeros(dg)
        pfit = numopt.expit(xmat @ gamma)
        fisher = (xmat * (pfit * (1 - pfit))[:, None]).T @ xmat \
            + np.eye(dg) / tm.prior_sd**2
        prop_cov = np.linalg.inv(fisher)
        sig2_z = None
        flat_gamma_prior = False
    prop_chol = np.linalg.cholesky(prop_cov + 1e-12 * np.eye(dg))
    base_scale = 2.38 / math.sqrt(dg)

    dmat = design.build(dataset, score=tm.score_from_linpred(xmat @ gamma))
    coefs = np.linalg.lstsq(dmat, y, rcond=None)[0]
    if fix_score_coef is not None:
        coefs[score_pos] = fix_score_coef
    resid = y - dmat @ coefs
    sig2_y = float(resid @ resid) / max(n - d_out, 1)

    free_cols = [i for i in range(d_out) if fix_score_coef is None or i != score_pos]

    def exposure_loglik(gam, linpred):
        if tm.family == "normal":
            r = z - linpred
            ll = -0.5 * float(r @ r) / sig2_z - 0.5 * n * math.log(sig2_z)
            return ll
        ll = float(np.sum(z * linpred - np.logaddexp(0.0, linpred)))
        return ll - 0.5 * float(gam @ gam) / tm.prior_sd**2

    linpred = xmat @ gamma
    exp_ll = exposure_loglik(gamma, linpred)
    out_resid = y - dmat @ coefs
    out_ll = -0.5 * float(out_resid @ out_resid) / sig2_y

    total = _MH_BURN + _MH_THIN * L
    keep_cols = np.empty((L, d_out))
    keep_gamma = np.empty((L, dg))
    keep_sig = np.empty(L)
    scale = 1.0
    accepted_window = 0
    accepted_main = 0
    k = 0
    for it in range(total):
        # 1. Metropolis step for the exposure coefficients.
        prop = gamma + (base_scale * scale) * (prop_chol @ rng.standard_normal(dg))
        prop_lin = xmat @ prop
        prop_score = tm.score_from_linpred(prop_lin)
        cand = dmat[:, score_pos].copy()
        dmat[:, score_pos] = prop_score
        prop_resid = y - dmat @ coefs
        prop_out_ll = -0.5 * float(prop_resid @ prop_resid) / sig2_y
        prop_exp_ll = exposure_loglik(prop, prop_lin)
        if math.log(rng.random()) < (prop_exp_ll + prop_out_ll) - (exp_ll + out_ll):
            gamma, linpred = prop, prop_lin
            exp_ll, out_ll = prop_exp_ll, prop_out_ll
            accepted_window += 1
            if it >= _MH_BURN:
                accepted_main += 1
        else:
            dmat[:, score_pos] = cand
        # 2. Blocked conjugate draw of the outcome parameters given the score.
        if fix_score_coef is None:
            sub = dmat
        else:
            sub = dmat[:, free_cols]
        target = y if fix_score_coef is None else y - fix_score_coef * dmat[:, score_pos]
        g_out = sub.T @ sub
        rhs = sub.T @ target
        try:
            bhat = np.linalg.solve(g_out, rhs)
            chol_out = np.linalg.cholesky(g_out)
        except np.linalg.LinAlgError:
            raise SingularDesignError("joint outcome design became singular") from None
        rss = float(max(target @ target - bhat @ rhs, 0.0))
        sig2_y = rss / rng.chisquare(max(n - sub.shape[1], 1))
        eta = rng.standard_normal(sub.shape[1])
        new_sub = bhat + math.sqrt(sig2_y) * np.linalg.solve(chol_out.T, eta)
        if fix_score_coef is None:
            coefs = new_sub
        else:
            coefs[free_cols] = new_sub
            coefs[score_pos] = fix_score_coef
        out_resid = y - dmat @ coefs
        out_ll = -0.5 * float(out_resid @ out_resid) / sig2_y
        # 3. Exposure variance draw for Normal exposures.
        if tm.family == "normal":
            r = z - linpred
            sig2_z = float(r @ r) / rng.chisquare(n)
            exp_ll = exposure_loglik(gamma, linpred)
        # Burn-in adaptation of the proposal scale.
        if it < _MH_BURN and (it + 1) % 100 == 0:
            rate = accepted_window / 100.0
            if rate < _ACC_LO:
                scale *= 0.7
            elif rate > _ACC_HI:
                scale *= 1.4
            accepted_window = 0
        if it >= _MH_BURN and (it - _MH_BURN) % _MH_THIN == _MH_THIN - 1:
            keep_cols[k] = coefs
            keep_gamma[k] = gamma
            keep_sig[k] = math.sqrt(sig2_y)
            k += 1
    assert k == L

    meta = {"engine": "joint-gibbs", "tag": tag, "scenario": spec.name,
            "acceptance": accepted_main / (_MH_THIN * L),
            "gamma_prior": "flat" if flat_gamma_prior else f"normal({tm.prior_sd})"}
    ate = design.ate_draws(keep_cols, dataset)
    draws = np.column_stack([keep_cols, keep_gamma, keep_sig, ate])
    names = design.names + tm.names + ("sigma", "ate")
    return PosteriorDraws(names=names, draws=draws, meta=meta)
