"""Exception types; each maps to a distinct CLI exit code."""


class VTFusionError(Exception):
    exit_code = 1
    category = "error"


class ConfigError(VTFusionError, ValueError):
    exit_code = 3
    category = "config"


class DataError(VTFusionError):
    exit_code = 4
    category = "data"


class LoadError(VTFusionError):
    """Checkpoint or backend weights could not be loaded (or do not match)."""

    exit_code = 5
    category = "load"


class TrainingAborted(VTFusionError, FloatingPointError):
    exit_code = 6
    category = "training"


class SizingError(VTFusionError, ValueError):
    """Image is too small for the configured synthesis regions."""

    exit_code = 4
    category = "data"


class UndefinedMetricError(VTFusionError, ValueError):
    exit_code = 4
    category = "data"
