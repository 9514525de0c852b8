"""Exception hierarchy.

Every error carries the process exit code the CLI maps it to:
1 usage/config, 2 data/format, 3 numeric failure.
"""


class HRIError(Exception):
    exit_code = 1


class ConfigError(HRIError):
    exit_code = 1


class DimensionError(HRIError, ValueError):
    exit_code = 3


class InputError(HRIError, ValueError):
    exit_code = 2


class LabelError(InputError):
    pass


class DataError(HRIError):
    exit_code = 2


class StreamError(DataError):
    pass


class BuildError(DataError):
    pass


class CheckpointError(DataError):
    pass


class NumericError(HRIError, ArithmeticError):
    exit_code = 3


class TrainingError(NumericError):
    pass


class CalibrationError(HRIError):
    exit_code = 3


class MetricError(HRIError, ValueError):
    exit_code = 2


class SamplingError(HRIError):
    exit_code = 3
