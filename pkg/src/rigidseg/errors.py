"""Exception types shared across the package."""


class ConfigError(ValueError):
    """A configuration value or required configuration file is invalid."""


class InputError(ValueError):
    """Input data (sequence files, clouds, scripts) violates a precondition."""


class PipelineError(RuntimeError):
    """A pipeline stage failed; carries the stage name for diagnostics."""

    def __init__(self, stage, message):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage
