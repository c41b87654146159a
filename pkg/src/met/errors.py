"""Exception hierarchy shared across the toolkit.

Every module raises subclasses of MetError so callers can catch one base
type at pipeline boundaries. Rejections that are ordinary outcomes
(proposal validation, filter verdicts) are values, not exceptions.
"""


class MetError(Exception):
    """Base class for all toolkit errors."""


# taxonomy
class TierLimitExceeded(MetError):
    pass


class DuplicateSibling(MetError):
    pass


class ParentNotFound(MetError):
    pass


class NotFound(MetError):
    pass


class StalePath(MetError):
    pass


class FrozenNode(MetError):
    pass


class IoFailure(MetError):
    pass


class SchemaVersionMismatch(MetError):
    pass


class InvariantViolation(MetError):
    pass


# extraction / parsing
class EmptyCorpus(MetError):
    pass


class ParseFailure(MetError):
    pass


# clustering / embeddings
class ProviderFailure(MetError):
    pass


class DimensionMismatch(MetError):
    pass


class DegenerateInput(MetError):
    pass


class SingleCluster(MetError):
    pass


class TooFewPoints(MetError):
    pass


class ZeroTotalFrequency(MetError):
    pass


class ZeroNorm(MetError):
    pass


# attachment
class EmptyCore(MetError):
    pass


# conflict resolution
class ToolFailure(MetError):
    pass


class GeneratorFailure(MetError):
    pass


class UnknownPathLabel(MetError):
    pass


class AlreadyApplied(MetError):
    pass


# matcher
class EmptyDictionary(MetError):
    pass


# coverage
class EmptySet(MetError):
    pass


# acquisition
class ClientFailure(MetError):
    pass


class TeacherFailure(MetError):
    pass


class JudgeFailure(MetError):
    pass


class DegenerateLabels(MetError):
    pass


class MissingEmbedding(MetError):
    pass


class DecodeFailure(MetError):
    pass


# synthesis
class NoLinkedEntities(MetError):
    pass


class MissingField(MetError):
    pass
