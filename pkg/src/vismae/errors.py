"""Exception hierarchy shared across the package.

The CLI maps each family onto a process exit code, so new exceptions should
subclass one of the families below rather than ``VismaeError`` directly.
"""


class VismaeError(Exception):
    """Base class for all package errors."""


# -- contract / configuration (exit code 2) ---------------------------------


class ConfigError(VismaeError):
    """Invalid or inconsistent configuration."""


class ContractError(VismaeError):
    """A function was called with inputs violating its documented contract."""


class FreezeViolation(ContractError):
    """A frozen (teacher) parameter changed."""


# -- data / schema (exit code 3) --------------------------------------------


class DataError(VismaeError):
    """Malformed, inconsistent or unusable data."""


class ValidationError(DataError):
    """A record fails schema validation."""


class DomainError(DataError):
    """A value lies outside the domain of a transform (e.g. log1p of x < 0)."""


class NumericInputError(DataError):
    """Non-finite numeric input."""


class LabelError(DataError):
    """Class label outside {0, 1}."""


class DegenerateMaskError(DataError):
    """A masked reduction selected no cells."""


class CannotFitError(DataError):
    """Statistics cannot be fit (e.g. an all-null column on the train split)."""


class StratificationError(DataError):
    """A class has too few members to be spread over every split."""


class DegenerateClassError(DataError):
    """A class is absent where both classes are required."""


class UndefinedMetricError(DataError):
    """A metric is undefined for the given inputs (zero denominator, one class)."""


# -- numerics (exit code 4) --------------------------------------------------


class DivergenceError(VismaeError):
    """Training produced a non-finite loss."""


# -- pipeline dependencies (exit code 5) -------------------------------------


class MissingArtifactError(VismaeError):
    """A pipeline stage needs an artifact that an earlier stage did not produce."""
