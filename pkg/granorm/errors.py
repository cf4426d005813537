"""Exception hierarchy shared by the granorm stages.

Every error carries the process exit code the CLI reports for it.
"""

from __future__ import annotations

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_MISSING_ARTIFACT = 2
EXIT_NUMERICAL = 3


class GranormError(Exception):
    exit_code = EXIT_USAGE


class UsageError(GranormError):
    exit_code = EXIT_USAGE


class ConfigError(GranormError):
    exit_code = EXIT_USAGE


class ShapeError(GranormError, ValueError):
    exit_code = EXIT_USAGE


class MissingArtifactError(GranormError):
    exit_code = EXIT_MISSING_ARTIFACT

    def __init__(self, path: object, hint: str | None = None) -> None:
        self.path = str(path)
        message = f"Missing artifact: {self.path}"
        if hint:
            message += f" ({hint})"
        super().__init__(message)


class StaleArtifactError(GranormError):
    """An artifact was produced from a different model or configuration."""

    exit_code = EXIT_MISSING_ARTIFACT

    def __init__(self, path: object, field: str, expected: str, found: str) -> None:
        self.path = str(path)
        self.field = field
        self.expected = expected
        self.found = found
        super().__init__(
            f"Stale artifact {self.path}: {field} is {found} but the current run expects "
            f"{expected}; rerun the producing stage"
        )


class ArtifactFormatError(GranormError):
    exit_code = EXIT_MISSING_ARTIFACT


class IdxFormatError(GranormError):
    exit_code = EXIT_MISSING_ARTIFACT

    def __init__(self, path: object, reason: str) -> None:
        self.path = str(path)
        super().__init__(f"{self.path}: {reason}")


class NumericalError(GranormError):
    exit_code = EXIT_NUMERICAL


class DivergenceError(NumericalError):
    def __init__(self, step: int, loss: float) -> None:
        self.step = step
        self.loss = loss
        super().__init__(f"Training diverged at step {step} (loss={loss})")


class CalibrationError(NumericalError):
    pass


class EmptySetupError(GranormError):
    exit_code = EXIT_NUMERICAL


class DetectorError(GranormError):
    exit_code = EXIT_USAGE
