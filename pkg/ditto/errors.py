"""
Exception hierarchy shared by every ditto module.
The CLI maps these onto exit codes (ConfigError -> 2, NumericalError -> 3).
"""

from typing import List, Optional


class DittoError(Exception):
    """Base class for all ditto failures."""


class ConfigError(DittoError, ValueError):
    """Invalid configuration or argument.

    Validation collects every problem it finds before raising, so ``errors``
    may hold more than one message.
    """

    def __init__(self, message: str, errors: Optional[List[str]] = None):
        self.errors = list(errors) if errors else [message]
        super().__init__(message if errors is None else f"{message}: " + "; ".join(self.errors))


class SchemaVersionError(ConfigError):
    """Config or artifact written with a different schema version."""

    def __init__(self, found, expected):
        self.found = found
        self.expected = expected
        super().__init__(
            f"schema_version {found!r} is not supported (expected {expected}); "
            f"migrate the file by re-running validate-config and updating schema_version"
        )


class NumericalError(DittoError, ArithmeticError):
    """Non-finite values or an unsatisfiable stability constraint."""

    def __init__(self, message: str, step: Optional[int] = None, time: Optional[float] = None):
        self.step = step
        self.time = time
        details = []
        if step is not None:
            details.append(f"step={step}")
        if time is not None:
            details.append(f"t={time:.6g}")
        super().__init__(message + (f" ({', '.join(details)})" if details else ""))


class CheckpointError(DittoError):
    """Corrupt or unreadable checkpoint / container payload."""
