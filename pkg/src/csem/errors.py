"""Exception hierarchy shared by all csem modules."""

from __future__ import annotations


class CsemError(Exception):
    """Base class for every error raised by csem."""


class UserError(CsemError):
    """Errors caused by invalid input (bad model, bad data, bad flags)."""


# ram-core
class SingularStructure(CsemError):
    """(I - A) is numerically singular at the requested parameter point."""


class RankDeficientConstraints(UserError):
    """Linear equality constraints are dependent or contradictory."""


class UndefinedDerived(CsemError):
    """A derived quantity cannot be evaluated (reciprocal of zero, singular block)."""


class SingularBlock(UndefinedDerived):
    pass


class DivisionByZero(UndefinedDerived):
    pass


# composite-builders
class ModelSpecificationError(UserError):
    """A composite block is incompatible with the requested specification."""


class FreeWeightsUnsupported(ModelSpecificationError):
    pass


class FreeWeightsOnOutcome(ModelSpecificationError):
    pass


class ZeroPseudoWeight(ModelSpecificationError):
    pass


class ZeroWeight(ModelSpecificationError):
    pass


class IsolatedComposite(ModelSpecificationError):
    pass


class UnsupportedFixedValues(ModelSpecificationError):
    pass


# estimator / fit metrics
class NotConverged(CsemError):
    def __init__(self, message, iterations=None, gradient_norm=None):
        super().__init__(message)
        self.iterations = iterations
        self.gradient_norm = gradient_norm


class SingularInformation(CsemError):
    """The information matrix is singular: the model is (empirically) under-identified."""


class NonPDImplied(CsemError):
    pass


class NegativeDF(UserError):
    pass


class ZeroVariance(CsemError):
    pass


class NotPositiveDefinite(UserError):
    pass


# data input
class MissingColumn(UserError):
    pass


class TooFewRows(UserError):
    pass


class NonNumericCell(UserError):
    def __init__(self, row, column, value):
        super().__init__(f"non-numeric value {value!r} in row {row}, column {column!r}")
        self.row = row
        self.column = column
        self.value = value


# model language
class ModelLanguageError(UserError):
    """Base for parse failures; ``diagnostics`` lists every problem found."""

    def __init__(self, diagnostics):
        self.diagnostics = list(diagnostics)
        super().__init__("\n".join(str(d) for d in self.diagnostics))


class ModelSyntaxError(ModelLanguageError):
    pass


class SemanticError(ModelLanguageError):
    pass
