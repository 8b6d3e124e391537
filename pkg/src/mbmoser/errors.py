"""Error types.

Every error carries a short ``tag`` (the class name) and a ``category``
that the CLI maps onto an exit code: ``validation`` errors mean the input
violates the hypotheses of the equivalence theorem (exit 2), ``numerical``
errors mean the solver could not deliver (exit 3).
"""

from __future__ import annotations


class MBError(Exception):
    category = "numerical"

    def __init__(self, message: str = "", **details):
        super().__init__(message)
        self.details = details

    @property
    def tag(self) -> str:
        return type(self).__name__


class ValidationError(MBError):
    category = "validation"


class NumericalError(MBError):
    category = "numerical"


# -- validation (exit 2) ----------------------------------------------------

class ParseError(ValidationError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} at offset {offset}", offset=offset)
        self.offset = offset


class ScenarioError(ValidationError):
    pass


class InvalidField(ValidationError):
    pass


class ZeroSetMismatch(ValidationError):
    pass


class NotIndexZero(ValidationError):
    pass


class InvalidZeroSet(ValidationError):
    pass


class NotTransverse(ValidationError):
    pass


class CohomologyMismatch(ValidationError):
    def __init__(self, message: str, components=(), discrepancies=()):
        super().__init__(message, components=list(components),
                         discrepancies=list(discrepancies))
        self.components = list(components)
        self.discrepancies = list(discrepancies)


class RelativeClassMismatch(ValidationError):
    pass


class InterpolationDegenerate(ValidationError):
    pass


# -- numerical (exit 3) -----------------------------------------------------

class NotSolvable(NumericalError):
    pass


class DegenerateVolume(NumericalError):
    pass


class NotDiffeomorphism(NumericalError):
    pass


class FlowBlowup(NumericalError):
    pass


class ChartOverlap(NumericalError):
    pass


class HadamardFailure(NumericalError):
    pass


class DegenerateB(NumericalError):
    pass


class EmbeddingDivergence(NumericalError):
    pass


class QuadratureFailure(NumericalError):
    pass


class TubeEscape(NumericalError):
    pass


class ResidualTooLarge(NumericalError):
    pass
