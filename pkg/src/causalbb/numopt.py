"""Weighted estimation primitives: Dirichlet weights, weighted least squares,
weighted logistic fits, and a damped Newton root finder for estimating equations.

These are the per-draw building blocks.  Tolerances are part of the contract:
callers rely on the stated score norms when they treat a fit as exact.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import (
    DivergedStepError,
    MaxIterationsError,
    SeparationError,
    SingularDesignError,
)

# Condition estimate above which a (possibly ridged) normal-equations matrix is
# treated as singular.
COND_LIMIT = 1e12
# Relative ridge applied to near-singular weighted Grams before giving up.
RIDGE_REL = 1e-8
_LOGIT_CAP = 35.0


@dataclass
class FitResult:
    """Outcome of one fit: solution, convergence state, and the residual score norm.

    ridged is True when the normal equations needed the fallback ridge; callers
    that run many fits count these as flagged draws.
    """

    coef: np.ndarray
    converged: bool
    iterations: int
    score_norm: float
    ridged: bool = False


def draw_dirichlet_weights(n: int, rng: np.random.Generator) -> np.ndarray:
    """One flat-Dirichlet weight vector via normalized standard exponentials.

    Returns a length-n probability vector; each component is positive and the
    components sum to 1 within 1e-12.
    """
    if n < 1:
        raise ValueError("need at least one weight")
    e = rng.standard_exponential(n)
    return e / e.sum()


def _check_weights(w: np.ndarray, n: int) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    if w.shape != (n,):
        raise ValueError(f"weight vector has shape {w.shape}, expected ({n},)")
    if not np.all(np.isfinite(w)) or np.any(w < 0):
        raise ValueError("weights must be finite and nonnegative")
    if w.sum() <= 0:
        raise ValueError("weights sum to zero")
    return w


def _sym_cond(a: np.ndarray) -> float:
    """Condition estimate for a symmetric PSD matrix (ratio of extreme eigenvalues)."""
    ev = np.linalg.eigvalsh(a)
    lo, hi = ev[0], ev[-1]
    if not np.isfinite(hi) or hi <= 0:
        return np.inf
    if lo <= 0:
        return np.inf
    return hi / lo


def wls_fit(design: np.ndarray, y: np.ndarray, w: np.ndarray) -> FitResult:
    """Weighted least squares: minimize sum_i w_i (y_i - x_i' t)^2.

    Near-singular Grams get a ridge of RIDGE_REL * trace/d and the fit is
    flagged; if the ridged Gram still has condition estimate above COND_LIMIT
    the design is hopeless and SingularDesignError is raised.
    """
    x = np.asarray(design, dtype=float)
    y = np.asarray(y, dtype=float)
    n, d = x.shape
    w = _check_weights(w, n)

    gram = (x * w[:, None]).T @ x
    rhs = x.T @ (w * y)
    ridged = False
    if _sym_cond(gram) > COND_LIMIT:
        gram = gram + (RIDGE_REL * np.trace(gram) / d) * np.eye(d)
        ridged = True
        if _sym_cond(gram) > COND_LIMIT:
            raise SingularDesignError(
                f"weighted design is singular (d={d}, condition above {COND_LIMIT:g})"
            )
    coef = np.linalg.solve(gram, rhs)
    score = x.T @ (w * (y - x @ coef))
    return FitResult(coef=coef, converged=True, iterations=1,
                     score_norm=float(np.linalg.norm(score)), ridged=ridged)


def expit(t: np.ndarray) -> np.ndarray:
    """Numerically safe inverse logit."""
    t = np.clip(t, -_LOGIT_CAP, _LOGIT_CAP)
    return 1.0 / (1.0 + np.exp(-t))


def _wlogit_loglik(x, z, w, coef, ridge):
    # sum_i w_i [z_i t_i - log(1 + e^{t_i})], stable for large |t|.
    t = x @ coef
    ll = float(np.sum(w * (z * t - np.logaddexp(0.0, t))))
    if ridge > 0:
        ll -= 0.5 * ridge * float(coef @ coef)
    return ll


def wlogit_fit(
    design: np.ndarray,
    z: np.ndarray,
    w: np.ndarray,
    ridge: float = 0.0,
    init: Optional[np.ndarray] = None,
    max_iter: int = 100,
) -> FitResult:
    """Weighted logistic regression by Newton iteration with step halving.

    Maximizes sum_i w_i [z_i t_i - log(1 + exp(t_i))] - ridge/2 ||coef||^2 with
    t = design @ coef.  Converged when the weighted score norm is <= 1e-10.
    Raises SeparationError (ridge 0 only) when the data are separable: either
    every positive-weight unit is fitted within 1e-8 of its label at the
    optimum, or 50 halvings cannot improve the objective while the
    coefficients grow without bound.  MaxIterationsError at the iteration cap.
    A fit that stalls at a flat optimum with bounded coefficients and real
    misclassified mass (saturated probabilities push the curvature below what
    step halving can use) comes back with converged=False and the best point
    found rather than an error.
    """
    x = np.asarray(design, dtype=float)
    z = np.asarray(z, dtype=float)
    n, d = x.shape
    w = _check_weights(w, n)
    coef = np.zeros(d) if init is None else np.asarray(init, dtype=float).copy()
    tol = 1e-10
    init_norm = float(np.linalg.norm(coef))

    ll = _wlogit_loglik(x, z, w, coef, ridge)
    for it in range(1, max_iter + 1):
        t = np.clip(x @ coef, -_LOGIT_CAP, _LOGIT_CAP)
        p = 1.0 / (1.0 + np.exp(-t))
        grad = x.T @ (w * (z - p)) - ridge * coef
        gnorm = float(np.linalg.norm(grad))
        if gnorm <= tol:
            if ridge == 0.0 and float(np.max(np.abs(z - p)[w > 0])) < 1e-8:
                raise SeparationError(
                    "perfect classification at the optimum: separated data")
            return FitResult(coef=coef, converged=True, iterations=it - 1,
                             score_norm=gnorm)
        h = (x * (w * p * (1.0 - p))[:, None]).T @ x
        if ridge > 0:
            h = h + ridge * np.eye(d)
        try:
            step = np.linalg.solve(h, grad)
        except np.linalg.LinAlgError:
            # Curvature collapsed entirely; report the best point found.
            return FitResult(coef=coef, converged=False, iterations=it - 1,
                             score_norm=gnorm)
        alpha = 1.0
        improved = False
        for _ in range(50):
            cand = coef + alpha * step
            cand_ll = _wlogit_loglik(x, z, w, cand, ridge)
            if cand_ll > ll:
                coef, ll = cand, cand_ll
                improved = True
                break
            alpha *= 0.5
        if not improved:
            grew = float(np.linalg.norm(coef)) > 1e4 * (1.0 + init_norm)
            classified = float(np.max(np.abs(z - p)[w > 0])) < 1e-8
            if ridge == 0.0 and (grew or classified):
                raise SeparationError(
                    "step halving exhausted with unbounded coefficients: separated data"
                )
            # Stalled at a flat optimum with bounded coefficients.
            return FitResult(coef=coef, converged=False, iterations=it,
                             score_norm=gnorm)
    raise MaxIterationsError(f"logistic fit did not converge in {max_iter} iterations")


def solve_estimating_equation(
    score: Callable[[np.ndarray], np.ndarray],
    init: np.ndarray,
    jacobian: Optional[Callable[[np.ndarray], np.ndarray]] = None,
    max_iter: int = 100,
) -> FitResult:
    """Solve score(t) = 0 by damped Newton with a finite-difference Jacobian.

    The default Jacobian is central differences with per-coordinate step
    1e-6 * (1 + |t_j|).  Convergence: ||score(t)|| <= 1e-10 * max(1, ||score(init)||).
    Step halving is applied to ||score||; DivergedStepError fires when the
    iterate's norm exceeds 1e8.
    """
    t = np.asarray(init, dtype=float).copy()
    d = t.shape[0]
    s = np.asarray(score(t), dtype=float)
    if s.shape != (d,):
        raise ValueError(f"score returned shape {s.shape}, expected ({d},)")
    tol = 1e-10 * max(1.0, float(np.linalg.norm(s)))

    def fd_jacobian(at: np.ndarray) -> np.ndarray:
        jac = np.empty((d, d))
        for j in range(d):
            h = 1e-6 * (1.0 + abs(at[j]))
            up = at.copy()
            dn = at.copy()
            up[j] += h
            dn[j] -= h
            jac[:, j] = (np.asarray(score(up)) - np.asarray(score(dn))) / (2.0 * h)
        return jac

    jac_fn = jacobian if jacobian is not None else fd_jacobian
    snorm = float(np.linalg.norm(s))
    for it in range(1, max_iter + 1):
        if snorm <= tol:
            return FitResult(coef=t, converged=True, iterations=it - 1, score_norm=snorm)
        jac = np.asarray(jac_fn(t), dtype=float)
        try:
            step = np.linalg.solve(jac, -s)
        except np.linalg.LinAlgError:
            raise SingularDesignError("singular Jacobian in estimating-equation solve")
        alpha = 1.0
        moved = False
        for _ in range(50):
            cand = t + alpha * step
            cand_s = np.asarray(score(cand), dtype=float)
            cand_norm = float(np.linalg.norm(cand_s))
            if cand_norm < snorm:
                t, s, snorm = cand, cand_s, cand_norm
                moved = True
                break
            alpha *= 0.5
        if not moved:
            raise MaxIterationsError(
                f"estimating-equation step stalled at score norm {snorm:.3e}"
            )
        if float(np.linalg.norm(t)) > 1e8:
            raise DivergedStepError("estimating-equation iterate diverged")
    if snorm <= tol:
        return FitResult(coef=t, converged=True, iterations=max_iter, score_norm=snorm)
    raise MaxIterationsError(
        f"estimating equation not solved in {max_iter} iterations (score norm {snorm:.3e})"
    )
