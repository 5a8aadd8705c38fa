"""Exception hierarchy.

Errors deriving from :class:`InputError` signal bad input (exit code 2 on the
command line); everything else derived from :class:`RspnError` is a runtime or
numerical failure (exit code 1).
"""


class RspnError(Exception):
    pass


class InputError(RspnError, ValueError):
    pass


class InvalidGraph(InputError):
    def __init__(self, report):
        self.report = report
        super().__init__("invalid circuit: " + "; ".join(report.errors))


class UnknownVariable(InputError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class InvalidEvidence(InputError):
    pass


class OverlappingEvidence(InputError):
    pass


class ZeroEvidence(RspnError):
    pass


class CyclicNetwork(InputError):
    pass


class NonDiscreteVariable(InputError):
    pass


class LengthTooShort(InputError):
    pass


class LengthMismatch(InputError):
    pass


class SpaceTooLarge(InputError):
    pass


class ParseError(InputError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class SchemaViolation(InputError):
    pass


class IndexOutOfRange(InputError, IndexError):
    pass


class EmptyDataset(InputError):
    pass


class NumericalFailure(RspnError):
    pass


class LeafNotFound(InputError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class InsufficientData(InputError):
    pass


class InvalidNetwork(InputError):
    pass
