from typing import Dict, Optional


class ParallelOutcomesError(Exception):
    """Base class for every failure raised by the estimators package."""

    exit_code = 3

    def __init__(self, message: str, details: Optional[Dict] = None):
        super().__init__(message)
        self.details = details or {}


# numerics

class NumericsError(ParallelOutcomesError):
    pass


class NonConvergence(NumericsError):
    pass


class DimensionMismatch(NumericsError):
    pass


class SingularSystem(NumericsError):
    pass


class BadFoldCount(NumericsError):
    pass


# categorical

class CategoricalError(ParallelOutcomesError):
    pass


class BadParams(CategoricalError):
    pass


class EmptyStratum(CategoricalError):
    pass


class RankDeficient(CategoricalError):
    pass


class ComplexSpectrum(CategoricalError):
    pass


class OrderInstability(CategoricalError):
    pass


class OptimFailure(CategoricalError):
    pass


class NotIdentifiable(CategoricalError):
    pass


# linear structural equation models

class LinearSEMError(ParallelOutcomesError):
    pass


class TooFewOutcomes(LinearSEMError):
    pass


class DegenerateSpectrum(LinearSEMError):
    pass


class NoFactors(LinearSEMError):
    pass


class NoCandidates(LinearSEMError):
    pass


class NoNegativeControls(LinearSEMError):
    pass


class FirstStageSingular(LinearSEMError):
    pass


class CollinearityWarning(UserWarning):
    """Exposure is close to the span of the fitted negative controls."""


# data preparation

class PipelineError(ParallelOutcomesError):
    pass


class NonPositiveLog(PipelineError):
    pass


class CovariateCollinearity(PipelineError):
    pass


# command line

class InputError(ParallelOutcomesError):
    exit_code = 2


class ConfigError(ParallelOutcomesError):
    exit_code = 1
