"""Exception hierarchy.

Validation errors (bad input or configuration) derive from
:class:`ValidationError`; everything else is a :class:`DQError`. The CLI maps
the former to exit code 1 and the latter to exit code 2.
"""


class DQError(Exception):
    """Base class for all engine errors."""


class ValidationError(DQError):
    """Input or configuration failed validation."""


# table_core
class MalformedCsv(ValidationError):
    pass


class SchemaMismatch(ValidationError):
    pass


class BadTimestamp(ValidationError):
    pass


class ShapeMismatch(ValidationError):
    pass


class EmptyTable(ValidationError):
    pass


# assessment
class BadFactor(ValidationError):
    pass


class BadClusterIndex(ValidationError):
    pass


class MissingRowMeta(ValidationError):
    pass


class DegenerateAge(DQError):
    pass


class EmptyLexicon(ValidationError):
    pass


class NoAccessData(ValidationError):
    pass


class MissingMetric(ValidationError):
    pass


class MissingAspect(ValidationError):
    pass


# entity_resolution
class WindowTooLarge(ValidationError):
    pass


class EmptyTrainingSet(DQError):
    pass


class SingleClassTraining(DQError):
    pass


class MissingSourceRank(ValidationError):
    pass


class CoverageUnreachable(UserWarning):
    """Predicate learning could not reach the requested recall."""


# anomaly_detection
class EmptyData(ValidationError):
    pass


class DimensionMismatch(ValidationError):
    pass


class AllZeroWeights(ValidationError):
    pass


class TruthMismatch(ValidationError):
    pass


# correction_engine
class NoFeatures(DQError):
    pass


class EmptyTraining(DQError):
    pass


class StaleReport(ValidationError):
    pass


class WeightMismatch(ValidationError):
    pass


# bench
class RateConflict(ValidationError):
    pass


class StageError(DQError):
    """Wraps a failure with the pipeline stage it happened in."""

    def __init__(self, stage, error):
        super().__init__(f"[{stage}] {type(error).__name__}: {error}")
        self.stage = stage
        self.error = error
