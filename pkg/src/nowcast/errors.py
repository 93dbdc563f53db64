"""Exception types shared by the pipeline stages.

Each pipeline error carries the process exit code the CLI reports for it.
"""


class PipelineError(Exception):
    exit_code = 1


class MissingArtifactError(PipelineError):
    """A stage was run before the stage that produces its inputs."""

    exit_code = 2

    def __init__(self, message: str, stage: str | None = None):
        super().__init__(message)
        self.stage = stage


class ValidationError(PipelineError, ValueError):
    exit_code = 3


class DataError(PipelineError, ValueError):
    """Input data is unusable (unreadable, or too many malformed rows)."""

    exit_code = 4
