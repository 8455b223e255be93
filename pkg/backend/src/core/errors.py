# src/core/errors.py

VALIDATION_EXIT_CODE = 2
MODEL_UNDEFINED_EXIT_CODE = 3
FIT_FAILURE_EXIT_CODE = 4


class CrashSimError(Exception):
    """Base error for the pipeline. `exit_code` is what the CLI exits with."""

    exit_code = VALIDATION_EXIT_CODE


class SeedParseError(CrashSimError):
    pass


class SeedValidationError(CrashSimError):
    pass


class GenerationError(CrashSimError):
    pass


class DistributionError(CrashSimError):
    pass


class ConfigError(CrashSimError):
    pass


class LoomingDomainError(CrashSimError, ValueError):
    pass


class ModelUndefinedError(CrashSimError):
    exit_code = MODEL_UNDEFINED_EXIT_CODE


class FitError(CrashSimError):
    exit_code = FIT_FAILURE_EXIT_CODE
