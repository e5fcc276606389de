"""Exception hierarchy shared by all icph modules."""


class ICPHError(Exception):
    """Base class for library errors."""


class DataError(ICPHError):
    """Problems with the input data (shape, content, parsing)."""


class NumericalError(ICPHError):
    """A computation could not produce a finite, well-defined answer."""


class ReducibleChain(NumericalError):
    pass


class DimensionMismatch(DataError):
    pass


class NonFiniteLikelihood(NumericalError):
    pass


class NonFiniteObjective(NumericalError):
    pass


class DegenerateData(DataError):
    pass


class AllRestartsFailed(NumericalError):
    pass


class SingularInformation(NumericalError):
    pass


class DomainError(ICPHError, ValueError):
    pass


class InsufficientData(DataError):
    pass


class SubsetBlowup(ICPHError):
    pass


class ComplexityError(ICPHError):
    """Permutation-assignment search would exceed the configured cap."""


class InvalidSpec(ICPHError, ValueError):
    pass


class IntegrationFailure(NumericalError):
    pass


class ParseError(DataError):
    def __init__(self, message, line=None, column=None):
        where = [f"{k} {v}" for k, v in (("line", line), ("column", column)) if v is not None]
        super().__init__(f"{message} ({', '.join(where)})" if where else message)
        self.line = line
        self.column = column


class MissingColumn(DataError):
    pass


class NonNumericValue(ParseError):
    pass


class EmptyEnvironment(DataError):
    pass
