"""Exception types shared across the pipeline."""


class MedPatchError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(MedPatchError, ValueError):
    """Invalid configuration value. The message names the offending field."""


class DataFormatError(MedPatchError, ValueError):
    """Malformed ingestion file or inconsistent sample record."""


class MissingModalityError(MedPatchError, ValueError):
    """An operation that needs a present modality received a missing one."""


class PrerequisiteError(MedPatchError):
    """A pipeline stage was requested before the stage it depends on."""

    def __init__(self, stage, message=None):
        self.stage = stage
        super().__init__(message or f"prerequisite stage '{stage}' has not been run")


class AbsentOutputError(MedPatchError, KeyError):
    """A fusion output was requested that the configured variant does not produce."""

    def __str__(self):
        return str(self.args[0]) if self.args else "absent output"
