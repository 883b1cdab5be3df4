"""Exception hierarchy shared by the workbench modules."""


class KTError(Exception):
    """Base class; ``kind`` is the machine-readable tag the CLI reports."""

    kind = "error"


class DimensionError(KTError, ValueError):
    kind = "dimension"


class EmptySupportError(KTError, ValueError):
    kind = "empty_support"


class ContractError(KTError, ValueError):
    kind = "contract"


class NumericError(KTError, FloatingPointError):
    kind = "numeric"


class SchemaError(KTError, ValueError):
    kind = "schema"


class CorruptMappingError(KTError, ValueError):
    kind = "corrupt_mapping"


class ParseError(KTError, ValueError):
    """Row-level problem in a CSV file; carries the 1-based line number."""

    kind = "parse"

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ProtocolError(KTError, ValueError):
    kind = "protocol"


class DataError(KTError, ValueError):
    kind = "data"


class DegenerateEvidenceError(KTError, ValueError):
    kind = "degenerate_evidence"


class InsufficientDataError(KTError, ValueError):
    kind = "insufficient_data"


class NoSignalError(KTError, ValueError):
    kind = "no_signal"


class UndefinedAUCError(KTError, ValueError):
    kind = "undefined_auc"


class ConfigError(KTError, ValueError):
    kind = "config"


class CompletenessError(KTError, ValueError):
    kind = "completeness"


class ValidationError(KTError, ValueError):
    kind = "validation"
