"""Data-generating processes.

Each scenario is a frozen ScenarioSpec describing confounder, treatment, and
outcome laws as explicit term lists (a term is a tuple of confounder indices
whose product enters the mean, paired with a coefficient).  The registry holds
the simulation-study scenarios plus a few auxiliary ones used by property
tests.  Truths either carry a closed form or fall back to a cached Monte Carlo
counterfactual oracle that simulates both potential outcomes from the
structural equations.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Iterable, Union

import numpy as np

from . import streams
from .errors import UnknownScenarioError

# A term: (confounder index tuple, coefficient).  () is the constant term.
Term = tuple[tuple[int, ...], float]


def eval_terms(x: np.ndarray, terms: Iterable[Term]) -> np.ndarray:
    """Evaluate sum_k coef_k * prod_{j in idx_k} x[:, j] for each row."""
    out = np.zeros(x.shape[0])
    for idx, coef in terms:
        if not idx:
            out += coef
            continue
        col = x[:, idx[0]].copy()
        for j in idx[1:]:
            col *= x[:, j]
        out += coef * col
    return out


@dataclass(frozen=True)
class ScenarioSpec:
    """Complete description of one data-generating process.

    confounders: ("mvnorm", means, rho) for an AR(1)-correlated Gaussian block
      with Cov_ij = rho^|i-j|, or ("indep", means, sds) for independent normals.
    treatment: ("normal", terms, sd) for a linear-Normal exposure,
      ("logistic", terms) for a Bernoulli exposure with logit given by the
      terms, or ("two-stage", mode) for the sequential-treatment process
      (mode "full" or "intercept" picks the analysis design for each stage).
    outcome: ("normal", base_terms, effect_terms, sd) where the conditional
      mean is base(x) + effect(x) * z, or ("poisson", base_terms, psi) with
      log mean base(x) + psi * z.
    estimand: (kind, value) with kind in {"ate", "att", "cells", "psi"};
      value None means the Monte Carlo oracle supplies it.
    """

    name: str
    p: int
    confounders: tuple
    treatment: tuple
    outcome: tuple
    estimand: tuple


@dataclass
class Dataset:
    """One simulated dataset; z has two columns for the two-stage scenario."""

    x: np.ndarray
    z: np.ndarray
    y: np.ndarray
    scenario: str
    seed: int

    @property
    def n(self) -> int:
        return self.x.shape[0]

    def to_csv(self, path) -> None:
        cols = [self.x[:, j] for j in range(self.x.shape[1])]
        names = [f"x{j + 1}" for j in range(self.x.shape[1])]
        if self.z.ndim == 2:
            cols += [self.z[:, 0], self.z[:, 1]]
            names += ["z", "z2"]
        else:
            cols.append(self.z)
            names.append("z")
        cols.append(self.y)
        names.append("y")
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(",".join(names) + "\n")
            for i in range(self.n):
                fh.write(",".join(repr(float(c[i])) for c in cols) + "\n")


def _ar1_cov(p: int, rho: float) -> np.ndarray:
    idx = np.arange(p)
    return rho ** np.abs(idx[:, None] - idx[None, :])


_EX2_BASE = (((0,), 0.25), ((1,), 0.25), ((2,), 0.25), ((3,), 0.25), ((2, 3), 1.5))
_APPB_OUTCOME = (((), 3.0), ((0,), -2.0), ((1,), 10.0), ((2,), 6.0))


def _ex2(name: str, gamma: tuple, tau: float = 0.0) -> ScenarioSpec:
    logit = (((), gamma[0]), ((0,), gamma[1]), ((1,), gamma[2]),
             ((2,), gamma[3]), ((3,), gamma[4]))
    return ScenarioSpec(
        name=name,
        p=4,
        confounders=("indep", (1.0, 1.0, -1.0, -1.0), (1.0, 1.0, 1.0, 1.0)),
        treatment=("logistic", logit),
        outcome=("normal", _EX2_BASE, (((), tau),), 1.0),
        estimand=("ate", tau),
    )


def _registry() -> dict[str, ScenarioSpec]:
    specs = [
        ScenarioSpec(
            name="ex1-normal",
            p=3,
            confounders=("mvnorm", (-1.0, 2.0, 0.5), 0.8),
            treatment=("normal",
                       (((), 1.0), ((0,), -1.0), ((1,), 1.0), ((2,), 2.0),
                        ((0, 1), -1.0), ((1, 2), 2.0)),
                       1.0),
            outcome=("normal",
                     (((), 1.0), ((0,), 1.0), ((1,), 1.0), ((2,), 1.0), ((1, 2), 5.0)),
                     (((), 5.0),),
                     1.0),
            estimand=("ate", 5.0),
        ),
        _ex2("ex2-s1", (0.0, 0.3, 0.8, 0.3, 0.8)),
        _ex2("ex2-s2", (0.5, 0.5, 0.75, 1.0, 1.0)),
        _ex2("ex2-s3", (0.0, 0.45, 0.90, 1.35, 1.8)),
        ScenarioSpec(
            name="ex3-hetero",
            p=4,
            confounders=("indep", (1.0, 1.0, -1.0, -1.0), (1.0, 1.0, 1.0, 1.0)),
            treatment=("logistic",
                       (((0,), 0.45), ((1,), 0.9), ((2,), 1.35), ((3,), 1.8))),
            outcome=("normal",
                     (((0,), 1.0), ((1,), 1.0), ((2,), 1.0), ((3,), 1.0),
                      ((0, 2), 0.75), ((1, 3), 0.75), ((0, 3), 0.75), ((2, 3), 0.75)),
                     (((), 1.0), ((0,), 2.0)),
                     1.0),
            estimand=("ate", 3.0),
        ),
        ScenarioSpec(
            name="msm-2stage",
            p=2,
            confounders=("two-stage", (), ()),
            treatment=("two-stage", "full"),
            outcome=("two-stage", (), (), 1.0),
            estimand=("cells", (-1.0, 1.0, 0.0, 2.0)),
        ),
        ScenarioSpec(
            name="appB-normal-z",
            p=3,
            confounders=("mvnorm", (2.0, -1.0, 0.5), 0.8),
            treatment=("normal",
                       (((), 5.0), ((0,), 5.0), ((1,), -3.0), ((2,), 2.0)),
                       5.0),
            outcome=("normal", _APPB_OUTCOME, (((), 5.0),), 1.0),
            estimand=("ate", 5.0),
        ),
        ScenarioSpec(
            name="appB-binary-z",
            p=3,
            confounders=("mvnorm", (2.0, -1.0, 0.5), 0.8),
            treatment=("logistic",
                       (((), 2.0), ((0,), -2.0), ((1,), -2.0), ((2,), 1.0))),
            outcome=("normal", _APPB_OUTCOME, (((), 5.0),), 1.0),
            estimand=("ate", 5.0),
        ),
        # Auxiliary scenarios for property and robustness tests.
        ScenarioSpec(
            name="dr-poisson",
            p=2,
            confounders=("indep", (0.0, 0.0), (1.0, 1.0)),
            treatment=("logistic", (((), 0.2), ((0,), 0.4), ((1,), 0.8))),
            outcome=("poisson", (((), 0.5), ((0,), 0.4), ((1,), 0.3)), 0.3),
            estimand=("psi", 0.3),
        ),
        ScenarioSpec(
            name="att-const",
            p=2,
            confounders=("indep", (0.0, 0.0), (1.0, 1.0)),
            treatment=("logistic", (((), 0.3), ((0,), 0.6), ((1,), -0.4))),
            outcome=("normal",
                     (((), 1.0), ((0,), 0.5), ((1,), 0.5)),
                     (((), 2.0),),
                     1.0),
            estimand=("att", 2.0),
        ),
        ScenarioSpec(
            name="att-hetero",
            p=2,
            confounders=("indep", (0.0, 0.0), (1.0, 1.0)),
            treatment=("logistic", (((), 0.3), ((0,), 0.6), ((1,), -0.4))),
            outcome=("normal",
                     (((), 1.0), ((0,), 0.5), ((1,), 0.5)),
                     (((0,), 1.0),),
                     1.0),
            estimand=("att", None),
        ),
        _ex2("ex2-rand", (0.0, 0.0, 0.0, 0.0, 0.0)),
        ScenarioSpec(
            name="msm-rand",
            p=2,
            confounders=("two-stage", (), ()),
            treatment=("two-stage", "intercept"),
            outcome=("two-stage", (), (), 1.0),
            estimand=("cells", (-1.0, 1.0, 0.0, 2.0)),
        ),
    ]
    return {s.name: s for s in specs}


_REGISTRY = _registry()


def list_scenarios() -> list[str]:
    """Registered scenario names in registry order."""
    return list(_REGISTRY)


def get_scenario(name: str) -> ScenarioSpec:
    try:
        return _REGISTRY[name]
    except KeyError:
        raise UnknownScenarioError(name) from None


def resolve(spec: Union[str, ScenarioSpec]) -> ScenarioSpec:
    return get_scenario(spec) if isinstance(spec, str) else spec


def with_tau(spec: Union[str, ScenarioSpec], tau: float) -> ScenarioSpec:
    """Variant of a constant-effect scenario with the treatment effect replaced."""
    spec = resolve(spec)
    kind, base_terms, effect_terms, sd = spec.outcome
    if kind != "normal" or len(effect_terms) != 1 or effect_terms[0][0] != ():
        raise ValueError(f"{spec.name} does not have a scalar constant effect")
    new_outcome = (kind, base_terms, (((), float(tau)),), sd)
    return replace(spec, name=f"{spec.name}@tau={tau:g}",
                   outcome=new_outcome, estimand=("ate", float(tau)))


def _draw_confounders(spec: ScenarioSpec, n: int, rng: np.random.Generator) -> np.ndarray:
    kind = spec.confounders[0]
    if kind == "mvnorm":
        _, means, rho = spec.confounders
        chol = np.linalg.cholesky(_ar1_cov(spec.p, rho))
        return np.asarray(means) + rng.standard_normal((n, spec.p)) @ chol.T
    if kind == "indep":
        _, means, sds = spec.confounders
        return np.asarray(means) + rng.standard_normal((n, spec.p)) * np.asarray(sds)
    raise ValueError(f"unknown confounder law {kind!r}")


def _two_stage(n: int, rng: np.random.Generator):
    # X1 ~ N(1,1); Z1 | X1 ~ Bern(expit(-2 + X1)); X2 | X1,Z1 ~ N(-3 + X1 + Z1, 1);
    # Z2 | X2 ~ Bern(expit(2 - X2)); Y ~ N(X1 + Z1 + X2 + Z2, 1).
    x1 = 1.0 + rng.standard_normal(n)
    p1 = 1.0 / (1.0 + np.exp(-(-2.0 + x1)))
    z1 = (rng.random(n) < p1).astype(float)
    x2 = -3.0 + x1 + z1 + rng.standard_normal(n)
    p2 = 1.0 / (1.0 + np.exp(-(2.0 - x2)))
    z2 = (rng.random(n) < p2).astype(float)
    y = x1 + z1 + x2 + z2 + rng.standard_normal(n)
    return np.column_stack([x1, x2]), np.column_stack([z1, z2]), y


def generate_dataset(spec: Union[str, ScenarioSpec], n: int, seed: int) -> Dataset:
    """Draw one dataset of size n from the scenario's own Philox stream.

    The stream is keyed on (seed, scenario name, n); the same triple always
    reproduces the dataset bit for bit.
    """
    spec = resolve(spec)
    if n < spec.p + 2:
        raise ValueError(f"n={n} too small for {spec.name} (need at least {spec.p + 2})")
    rng = streams.data_stream(seed, spec.name, n)

    if spec.treatment[0] == "two-stage":
        x, z, y = _two_stage(n, rng)
        return Dataset(x=x, z=z, y=y, scenario=spec.name, seed=seed)

    x = _draw_confounders(spec, n, rng)
    if spec.treatment[0] == "normal":
        _, terms, sd = spec.treatment
        z = eval_terms(x, terms) + sd * rng.standard_normal(n)
    elif spec.treatment[0] == "logistic":
        _, terms = spec.treatment
        prob = 1.0 / (1.0 + np.exp(-eval_terms(x, terms)))
        z = (rng.random(n) < prob).astype(float)
    else:
        raise ValueError(f"unknown treatment law {spec.treatment[0]!r}")

    if spec.outcome[0] == "normal":
        _, base_terms, effect_terms, sd = spec.outcome
        mean = eval_terms(x, base_terms) + eval_terms(x, effect_terms) * z
        y = mean + sd * rng.standard_normal(n)
    elif spec.outcome[0] == "poisson":
        _, base_terms, psi = spec.outcome
        mu = np.exp(eval_terms(x, base_terms) + psi * z)
        y = rng.poisson(mu).astype(float)
    else:
        raise ValueError(f"unknown outcome law {spec.outcome[0]!r}")
    return Dataset(x=x, z=z, y=y, scenario=spec.name, seed=seed)


def mc_estimand(spec: Union[str, ScenarioSpec], draws: int = 10**7,
                seed: int | None = None):
    """Monte Carlo counterfactual estimate of the scenario's estimand.

    Simulates both potential outcomes from the structural equations (shared
    unit-level noise) and returns (value, standard_error); cells come back as
    arrays of four.  Used both as the oracle behind true_estimand and as an
    independent cross-check in tests.
    """
    spec = resolve(spec)
    if seed is None:
        seed = streams.mix64(streams.ORACLE_TAG, streams.name_key(spec.name))
    rng = streams.generator(seed)
    kind = spec.estimand[0]

    if spec.treatment[0] == "two-stage":
        chunks = max(1, draws // 10**6)
        per = draws // chunks
        sums = np.zeros(4)
        sqs = np.zeros(4)
        total = 0
        for _ in range(chunks):
            x1 = 1.0 + rng.standard_normal(per)
            eps_x2 = rng.standard_normal(per)
            eps_y = rng.standard_normal(per)
            for k, (a1, a2) in enumerate(((0, 0), (1, 0), (0, 1), (1, 1))):
                x2 = -3.0 + x1 + a1 + eps_x2
                yk = x1 + a1 + x2 + a2 + eps_y
                sums[k] += yk.sum()
                sqs[k] += (yk**2).sum()
            total += per
        mean = sums / total
        var = sqs / total - mean**2
        return mean, np.sqrt(var / total)

    chunks = max(1, draws // 10**6)
    per = draws // chunks
    if kind == "psi":
        # The structural log-rate ratio is a model constant, not an average.
        return float(spec.outcome[2]), 0.0
    if kind == "ate":
        _, base_terms, *rest = spec.outcome
        s = 0.0
        sq = 0.0
        total = 0
        for _ in range(chunks):
            x = _draw_confounders(spec, per, rng)
            if spec.outcome[0] == "poisson":
                base = np.exp(eval_terms(x, base_terms))
                diff = base * (np.exp(spec.outcome[2]) - 1.0)
            else:
                diff = eval_terms(x, spec.outcome[2])
            s += diff.sum()
            sq += (diff**2).sum()
            total += per
        mean = s / total
        var = max(sq / total - mean**2, 0.0)
        return float(mean), float(np.sqrt(var / total))
    if kind == "att":
        _, base_terms, effect_terms, sd = spec.outcome
        s = 0.0
        sq = 0.0
        m = 0
        for _ in range(chunks):
            x = _draw_confounders(spec, per, rng)
            prob = 1.0 / (1.0 + np.exp(-eval_terms(x, spec.treatment[1])))
            z = rng.random(per) < prob
            tau = eval_terms(x, effect_terms)[z]
            s += tau.sum()
            sq += (tau**2).sum()
            m += int(z.sum())
        mean = s / m
        var = max(sq / m - mean**2, 0.0)
        return float(mean), float(np.sqrt(var / m))
    raise ValueError(f"no oracle for estimand kind {kind!r}")


_ORACLE_CACHE: dict[str, object] = {}


def true_estimand(spec: Union[str, ScenarioSpec]):
    """Registry truth: the declared closed form, or the cached 10^7-draw oracle."""
    spec = resolve(spec)
    kind, value = spec.estimand
    if value is not None:
        if kind == "cells":
            return np.asarray(value, dtype=float)
        return float(value)
    if spec.name not in _ORACLE_CACHE:
        val, _ = mc_estimand(spec, draws=10**7)
        _ORACLE_CACHE[spec.name] = val
    return _ORACLE_CACHE[spec.name]
