"""Exception hierarchy shared by every gasmil module."""


class GasMilError(Exception):
    """Base class for domain errors (mapped to exit code 1 by the CLI)."""


class DimensionError(GasMilError, ValueError):
    pass


class ParameterError(GasMilError, ValueError):
    pass


class ConfigError(GasMilError, ValueError):
    pass


class NumericError(GasMilError, FloatingPointError):
    pass


class UsageError(GasMilError, RuntimeError):
    pass


class UndefinedMetricError(GasMilError, ValueError):
    pass


class FormatError(GasMilError, ValueError):
    """Malformed binary file; ``offset`` is the byte position of the fault."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset
