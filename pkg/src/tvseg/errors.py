"""Exception hierarchy shared by every tvseg module."""


class TVSegError(Exception):
    pass


class DimensionError(TVSegError, ValueError):
    """Array shapes do not agree with an operation's contract."""


class ConfigError(TVSegError, ValueError):
    pass


class LabelError(TVSegError, ValueError):
    pass


class DataError(TVSegError):
    """Unreadable, malformed or inconsistent dataset files."""


class FormatError(DataError):
    pass


class ManifestError(DataError):
    pass


class CheckpointError(TVSegError):
    pass


class TrainingError(TVSegError, FloatingPointError):
    pass


class NotComputable(TVSegError, ValueError):
    """A statistic is undefined for the given inputs (e.g. no foreground)."""
