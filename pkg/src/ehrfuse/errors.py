"""Exception types raised across the pipeline."""


class EhrFuseError(Exception):
    """Base class for all package errors."""


# ontology
class MalformedRow(EhrFuseError, ValueError):
    pass


class DuplicateConflict(EhrFuseError, ValueError):
    pass


class EmptyDescription(EhrFuseError, ValueError):
    pass


class EmptyDefinitionSet(EhrFuseError, ValueError):
    pass


class MalformedDefinition(EhrFuseError, ValueError):
    pass


# records
class MalformedLine(EhrFuseError, ValueError):
    pass


class UnknownSource(EhrFuseError, ValueError):
    pass


class DescriptionTooLong(EhrFuseError, ValueError):
    pass


# tokenizer
class SizeTooSmall(EhrFuseError, ValueError):
    pass


class BudgetExceeded(EhrFuseError, ValueError):
    pass


class UnknownId(EhrFuseError, KeyError):
    pass


# augmentation / training
class EmptyCorpus(EhrFuseError, ValueError):
    pass


class DimensionMismatch(EhrFuseError, ValueError):
    pass


class NoPositives(EhrFuseError, ValueError):
    pass


class NonFiniteGradient(EhrFuseError, FloatingPointError):
    pass


class DivergedLoss(EhrFuseError, FloatingPointError):
    pass


# encoder
class ShapeMismatch(EhrFuseError, ValueError):
    pass


class GraphNotRecorded(EhrFuseError, RuntimeError):
    pass


class CorruptCheckpoint(EhrFuseError, ValueError):
    pass


class ConfigMismatch(EhrFuseError, ValueError):
    pass


# evaluation
class EmptyCohort(EhrFuseError, ValueError):
    pass


class InsufficientData(EhrFuseError, ValueError):
    pass


# synthgen / cli
class ConfigInvalid(EhrFuseError, ValueError):
    pass
