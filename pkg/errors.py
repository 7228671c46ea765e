"""Exception hierarchy for dnpr."""

from typing import Any, Optional


class DnprError(Exception):
    """Base class for every error raised by dnpr."""


class ConfigurationError(DnprError):
    """Invalid spin species, system, protocol or experiment settings."""


class ConfigParseError(ConfigurationError):
    """Config text is not valid TOML."""

    def __init__(self, message: str, line: Optional[int] = None, column: Optional[int] = None):
        super().__init__(message)
        self.line = line
        self.column = column


class ConfigValidationError(ConfigurationError):
    """A config value or key failed validation."""

    def __init__(self, message: str, key_path: str = ""):
        super().__init__(f"{key_path}: {message}" if key_path else message)
        self.key_path = key_path


class SchemaVersionError(ConfigurationError):
    pass


class DegenerateGeometry(DnprError):
    """Pair geometry cannot produce a finite coupling."""


class ContractViolation(DnprError):
    """An operator failed the Hermiticity or density-matrix contract."""


class NoMatchingField(DnprError):
    pass


class StiffnessError(DnprError):
    """Step controller asked for a step below the floor."""


class DomainError(DnprError):
    pass


class DegenerateModel(DnprError):
    pass


class DegenerateData(DnprError):
    pass


class FitFailed(DnprError):
    """No multistart run converged; `best` holds the best-so-far result."""

    def __init__(self, message: str, best: Any = None):
        super().__init__(message)
        self.best = best


class OutputError(DnprError):
    """Output could not be written."""
