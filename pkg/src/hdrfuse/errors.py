"""Exception taxonomy shared across the toolkit.

The CLI maps these onto process exit codes: config problems exit 2, data
problems exit 3, numeric-contract violations exit 4.
"""


class HdrfuseError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(HdrfuseError):
    """Invalid or inconsistent configuration (unknown keys, bad values)."""


class DataError(HdrfuseError):
    """Missing, malformed, or out-of-contract input data."""


class FormatError(DataError):
    """A file does not conform to its on-disk format."""


class ValidationError(DataError):
    """In-memory values violate a type invariant."""


class PlanError(ConfigError):
    """An injection plan names layers that do not resolve."""


class NumericContractError(HdrfuseError):
    """A numeric contract (bounds, equivalence tolerance) was violated."""


class DegenerateImageWarning(UserWarning):
    """Emitted when a metric is evaluated on degenerate input (e.g. all-zero)."""
