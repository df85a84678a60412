"""Exception hierarchy.

Every error raised on purpose by the toolkit derives from ``ParamDeltaError``;
the CLI prints the class name as the machine-parseable error class.
"""


class ParamDeltaError(Exception):
    """Base class for all toolkit errors."""

    @property
    def error_class(self) -> str:
        return type(self).__name__


# checkpoint I/O
class MalformedHeader(ParamDeltaError):
    pass


class UnsupportedDType(MalformedHeader):
    pass


class OverlappingRegions(ParamDeltaError):
    pass


class TruncatedFile(ParamDeltaError):
    pass


class DuplicateTensorName(ParamDeltaError):
    pass


class UnknownTensor(ParamDeltaError, KeyError):
    def __str__(self) -> str:
        return Exception.__str__(self)


class IoFailure(ParamDeltaError):
    pass


class ShapeMismatch(ParamDeltaError):
    pass


# combination engine
class NotHomologous(ParamDeltaError):
    pass


class ShapeConflict(ParamDeltaError):
    pass


class EmptyIntersection(ParamDeltaError):
    pass


class NonFiniteCoefficient(ParamDeltaError):
    pass


class InvalidSpec(ParamDeltaError):
    pass


# analysis
class NoSharedTensors(ParamDeltaError):
    pass


class EmptyInput(ParamDeltaError):
    pass


# transfer metrics
class MalformedScoreTable(ParamDeltaError):
    pass


class NoCompleteTriples(ParamDeltaError):
    pass


class DegenerateInput(ParamDeltaError):
    pass


class DuplicateAlpha(ParamDeltaError):
    pass


class NonFiniteAlpha(ParamDeltaError):
    pass


class SchemaMismatch(ParamDeltaError):
    pass
