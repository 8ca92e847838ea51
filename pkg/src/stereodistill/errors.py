"""Exception types shared across the package.

CLI exit-code mapping: ConfigError/FormatError/LoadError -> 2,
NumericError -> 3, everything else is a bug.
"""


class ConfigError(ValueError):
    """Invalid configuration (bad value, unknown key, degenerate geometry)."""


class FormatError(ValueError):
    """Malformed file content (bad header, truncated payload)."""


class ContractError(ValueError):
    """Caller violated an operation precondition (shape mismatch, bad index)."""


class DegenerateInputError(ValueError):
    """Input is structurally empty (e.g. a point set with zero points)."""


class LoadError(ValueError):
    """A stored record failed validation on load."""


class NumericError(RuntimeError):
    """Non-finite value encountered during optimization."""
