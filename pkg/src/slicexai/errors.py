"""Exception types raised across the package."""


class SliceXAIError(Exception):
    """Base class for all package errors."""


# volume I/O and slicing
class MalformedHeader(SliceXAIError, ValueError):
    pass


class DimensionMismatch(SliceXAIError, ValueError):
    pass


class NonFiniteVoxel(SliceXAIError, ValueError):
    pass


class IoFailure(SliceXAIError, OSError):
    pass


class TooManySlices(SliceXAIError, ValueError):
    pass


class ShapeMismatch(SliceXAIError, ValueError):
    pass


# phantom
class InvalidSpec(SliceXAIError, ValueError):
    pass


# model
class WrongChannelCount(SliceXAIError, ValueError):
    pass


class EmptySequence(SliceXAIError, ValueError):
    pass


class LengthMismatch(SliceXAIError, ValueError):
    pass


class GradientUnavailable(SliceXAIError, RuntimeError):
    pass


# training
class TooFewSubjects(SliceXAIError, ValueError):
    pass


class DivergedLoss(SliceXAIError, RuntimeError):
    pass


class EmptyPartition(SliceXAIError, ValueError):
    pass


class SubjectLeakage(SliceXAIError, ValueError):
    pass


class ArchitectureMismatch(SliceXAIError, ValueError):
    pass


# evaluation / xai
class EmptyEvaluation(SliceXAIError, ValueError):
    pass


class EmptyPredictions(SliceXAIError, ValueError):
    pass


class IncompatibleAggregation(SliceXAIError, ValueError):
    pass


class EmptySubset(SliceXAIError, ValueError):
    pass


class TooFewFolds(SliceXAIError, ValueError):
    pass


class ConfigError(SliceXAIError, ValueError):
    pass
