"""Exception taxonomy shared across the library.

Every error raised on purpose derives from MtaLabError so callers (and the
CLI exit-code mapping) can distinguish library failures from genuine bugs.
"""


class MtaLabError(Exception):
    """Base class for all library errors."""

    category = "internal"


class DimensionError(MtaLabError):
    """Tensor shapes or axes violate an operation's contract."""

    category = "dimension"


class ParameterError(MtaLabError):
    """A numeric hyperparameter is out of its valid range."""

    category = "parameter"


class ConfigError(MtaLabError):
    """Invalid configuration; carries the full list of violations."""

    category = "config"

    def __init__(self, violations):
        if isinstance(violations, str):
            violations = [violations]
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


class InputError(MtaLabError):
    """A model input (ids, lengths, batch) violates a precondition."""

    category = "input"


class RoutingError(MtaLabError):
    """Unknown task id or otherwise unroutable request."""

    category = "routing"


class StateError(MtaLabError):
    """Operation called in the wrong lifecycle state (e.g. double promotion)."""

    category = "state"


class ContractError(MtaLabError):
    """An internal API contract was violated (e.g. non-scalar loss)."""

    category = "contract"


class TokenizationError(MtaLabError):
    """Out-of-vocabulary token or undecodable id."""

    category = "tokenization"


class GenerationError(MtaLabError):
    """Synthetic data generation cannot satisfy its constraints."""

    category = "generation"


class ParseError(MtaLabError):
    """A persisted file is malformed; carries the offending line number."""

    category = "parse"

    def __init__(self, message, line_number=None):
        self.line_number = line_number
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)


class EvaluationError(MtaLabError):
    """Evaluation preconditions violated (e.g. a task family is absent)."""

    category = "evaluation"


class ExportError(MtaLabError):
    """Nothing to export (e.g. model has no adapter-mixture layers)."""

    category = "export"


class DivergenceError(MtaLabError):
    """Training produced a non-finite loss; carries a diagnostic dump."""

    category = "divergence"

    def __init__(self, message, dump=None):
        self.dump = dump or {}
        super().__init__(message)


class MissingFileError(MtaLabError):
    """A required input file or checkpoint does not exist."""

    category = "missing-file"
