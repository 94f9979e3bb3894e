"""Error taxonomy shared across modules.

The CLI maps these onto process exit codes: ConfigError -> 2,
NumericalError -> 3, FileFormatError -> 4.
"""


class ConfigError(ValueError):
    pass


class NumericalError(RuntimeError):
    pass


class FileFormatError(IOError):
    pass


class ShapeError(ValueError):
    pass


class PipelineError(RuntimeError):
    """A stage failed; carries the stage name and the original cause."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause
