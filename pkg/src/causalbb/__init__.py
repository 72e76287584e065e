"""Bayesian propensity-score inference with parametric and bootstrap engines.

The package covers the full estimator menu for binary and continuous
treatments: joint, cut-feedback, and two-step parametric posteriors, and
Dirichlet-weight Bayesian-bootstrap versions of the two-step, cut-feedback,
IPW, ATT, doubly robust Poisson, and sequential-MSM estimators, together with
a registry of simulation scenarios and a replication harness.
"""

from .bboot import (
    CaseWeightRule,
    LossSpec,
    bb_att,
    bb_cut_feedback,
    bb_dr_poisson,
    bb_ipw,
    bb_minimize,
    bb_msm,
    bb_two_step,
    default_weight_draws,
)
from .dgp import (
    Dataset,
    ScenarioSpec,
    generate_dataset,
    get_scenario,
    list_scenarios,
    mc_estimand,
    true_estimand,
    with_tau,
)
from .errors import (
    CausalbbError,
    DivergedStepError,
    ExtremePropensityError,
    MaxIterationsError,
    NonPositiveOutcomeError,
    ParseError,
    SchemaError,
    SeparationError,
    SingularDesignError,
    UnknownParameterError,
    UnknownScenarioError,
    ValidationError,
)
from .harness import (
    BalanceRow,
    EstimatorSpec,
    MetricsRow,
    RunResult,
    balance_diagnostic,
    compute_metrics,
    run_estimator,
    run_replicates,
    summarize_draws,
    write_metrics_csv,
    write_records_csv,
)
from .numopt import (
    FitResult,
    draw_dirichlet_weights,
    solve_estimating_equation,
    wlogit_fit,
    wls_fit,
)
from .posterior import (
    OutcomeDesign,
    PosteriorDraws,
    TreatModel,
    cut_feedback_draws,
    joint_gibbs,
    linreg_conjugate_draws,
    logistic_mh_draws,
    outcome_design,
    treat_model,
    two_step_draws,
)

__version__ = "0.1.0"

__all__ = [
    "BalanceRow", "CaseWeightRule", "CausalbbError", "Dataset",
    "DivergedStepError", "EstimatorSpec", "ExtremePropensityError",
    "FitResult", "LossSpec", "MaxIterationsError", "MetricsRow",
    "NonPositiveOutcomeError", "OutcomeDesign", "ParseError",
    "PosteriorDraws", "RunResult", "ScenarioSpec", "SchemaError",
    "SeparationError", "SingularDesignError", "TreatModel",
    "UnknownParameterError", "UnknownScenarioError", "ValidationError",
    "balance_diagnostic", "bb_att", "bb_cut_feedback", "bb_dr_poisson",
    "bb_ipw", "bb_minimize", "bb_msm", "bb_two_step", "compute_metrics",
    "cut_feedback_draws", "default_weight_draws", "draw_dirichlet_weights",
    "generate_dataset", "get_scenario", "joint_gibbs",
    "linreg_conjugate_draws", "list_scenarios", "logistic_mh_draws",
    "mc_estimand", "outcome_design", "run_estimator", "run_replicates",
    "solve_estimating_equation", "summarize_draws", "treat_model",
    "true_estimand", "two_step_draws", "with_tau", "wlogit_fit", "wls_fit",
    "write_metrics_csv", "write_records_csv",
]
