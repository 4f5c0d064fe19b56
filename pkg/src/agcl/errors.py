"""Exception hierarchy shared by all agcl modules.

Every error raised by the package derives from AgclError so callers
(in particular the CLI) can map failures onto exit codes: validation
and configuration problems exit 1, numeric or verification failures
exit 2.
"""


class AgclError(Exception):
    """Base class for all package errors."""


class StructuralError(AgclError):
    """Shape mismatch, missing file, malformed graph or batch."""


class NumericError(AgclError):
    """Non-finite value, degenerate vector, or failed numeric contract."""


class StateError(AgclError):
    """Operation called in the wrong order (e.g. backward before forward)."""


class ConfigurationError(AgclError):
    """Invalid or unsatisfiable configuration (e.g. object placement)."""


class ValidationError(AgclError):
    """Bad user input: config keys, ranges, malformed labels."""


class CapacityError(AgclError):
    """Not enough data to satisfy a request (e.g. minibatch too large)."""


class CorruptionError(AgclError):
    """Checksum or header mismatch, truncated file."""


class VersionError(AgclError):
    """Unknown schema version in a persisted file."""


class CompatibilityError(AgclError):
    """Persisted configuration does not match the requested one."""


class RangeError(AgclError):
    """Value outside its documented range."""
