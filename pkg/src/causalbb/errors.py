"""Exception types shared across the package."""


class CausalbbError(Exception):
    """Base class for all package errors."""


class SingularDesignError(CausalbbError):
    """Design matrix is singular beyond what ridge regularization can rescue."""


class SeparationError(CausalbbError):
    """Logistic fit diverged: the data are (quasi-)separated."""


class MaxIterationsError(CausalbbError):
    """Iterative solver hit its iteration cap without converging."""


class DivergedStepError(CausalbbError):
    """Newton iterate left the trust region (parameter norm blew up)."""


class ExtremePropensityError(CausalbbError):
    """A fitted treatment density fell below the safe floor with truncation off."""


class NonPositiveOutcomeError(CausalbbError):
    """Count outcome required: y must be nonnegative integers."""


class UnknownScenarioError(CausalbbError, KeyError):
    """Scenario name not present in the registry."""


class UnknownParameterError(CausalbbError, KeyError):
    """Requested parameter name not among a draw container's columns."""


class ParseError(CausalbbError):
    """Config file could not be parsed (bad syntax or unknown key)."""


class ValidationError(CausalbbError):
    """Config parsed but the values are inconsistent or out of range."""


class SchemaError(CausalbbError):
    """A metrics CSV did not have the expected columns."""
