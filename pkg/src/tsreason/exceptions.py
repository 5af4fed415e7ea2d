"""Exception hierarchy shared across the package."""


class TSReasonError(Exception):
    """Base class for all package errors."""


# -- data -------------------------------------------------------------------


class DataError(TSReasonError):
    pass


class FileUnreadable(DataError):
    pass


class SchemaMismatch(DataError):
    pass


class NonMonotoneTimestamps(DataError):
    def __init__(self, row, previous, current):
        self.row = row
        super().__init__(
            f"timestamps not strictly increasing at row {row}: {current} follows {previous}"
        )


class IrregularSampling(DataError):
    def __init__(self, row, expected, found):
        self.row = row
        super().__init__(f"gap at row {row} is {found}, expected {expected}")


class UnparseableCell(DataError):
    def __init__(self, row, column, raw):
        self.row = row
        self.column = column
        self.raw = raw
        super().__init__(f"cannot parse {raw!r} at row {row}, column {column!r}")


class InvalidRatios(DataError):
    pass


class PartTooShort(DataError):
    def __init__(self, part, required, available):
        self.part = part
        self.required = required
        self.available = available
        super().__init__(f"{part} split has {available} rows, needs {required}")


class FrameTooShort(DataError):
    pass


class MaskOutOfRange(DataError):
    pass


class MissingValues(DataError):
    pass


# -- prompt -----------------------------------------------------------------


class PromptError(TSReasonError):
    pass


class OffsetNotMultipleOfFrequency(PromptError):
    pass


class DegenerateWindow(PromptError):
    pass


class MissingTrainStats(PromptError):
    pass


# -- providers --------------------------------------------------------------


class ProviderError(TSReasonError):
    pass


class AuthMissing(ProviderError):
    pass


class Timeout(ProviderError):
    pass


class RateLimited(ProviderError):
    pass


class UpstreamError(ProviderError):
    def __init__(self, status, body):
        self.status = status
        self.body = body
        super().__init__(f"upstream returned {status}: {body[:200]}")


class FixtureMiss(ProviderError):
    pass


class CacheCorrupt(ProviderError):
    pass


# -- parsing ----------------------------------------------------------------


class ParseError(TSReasonError):
    """Recoverable parse problem, input to the repair policy."""


class BlockNotFound(ParseError):
    pass


class UnbalancedMarkers(ParseError):
    pass


class WrongLength(ParseError):
    def __init__(self, found, expected, values=None):
        self.found = found
        self.expected = expected
        self.values = values
        super().__init__(f"found {found} values, expected {expected}")


class NonNumericToken(ParseError):
    def __init__(self, token, position):
        self.token = token
        self.position = position
        super().__init__(f"non-numeric token {token!r} at position {position}")


class NonFinite(ParseError):
    pass


class ParseFailure(TSReasonError):
    """Terminal parse failure; carries the raw response for the run log."""

    def __init__(self, message, raw_text="", round_index=None):
        self.raw_text = raw_text
        self.round_index = round_index
        super().__init__(message)


class MissingFinalBlock(ParseFailure):
    pass


# -- evaluation / diagnostics -----------------------------------------------


class EvaluationError(TSReasonError):
    pass


class LengthMismatch(EvaluationError):
    pass


class EmptyGroup(EvaluationError):
    pass


class TooFewSamples(EvaluationError):
    pass


class TooFewRecords(EvaluationError):
    pass


class DiagnosticError(TSReasonError):
    pass


class DegenerateLookback(DiagnosticError):
    pass


class PredTooLong(DiagnosticError):
    pass


class ConstantInput(DiagnosticError):
    pass


class ConstantTruth(DiagnosticError):
    pass


# -- runner -----------------------------------------------------------------


class ConfigInvalid(TSReasonError):
    def __init__(self, field, reason):
        self.field = field
        self.reason = reason
        super().__init__(f"{field}: {reason}")


class GridTooLarge(TSReasonError):
    pass


class RunDirMissing(TSReasonError):
    pass


class NonFiniteInput(EvaluationError):
    pass
