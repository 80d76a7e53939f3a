class LabError(Exception):
    """Base class for every error raised by the lab."""


class DimensionMismatch(LabError, ValueError):
    pass


class DatasetFormatError(LabError):
    def __init__(self, line_number, message):
        self.line_number = line_number
        self.message = message
        super().__init__(f"line {line_number}: {message}")

    def __reduce__(self):
        return type(self), (self.line_number, self.message)


class EmptyDatasetError(LabError, ValueError):
    pass


class ModelFormatError(LabError):
    pass


class CertificationError(LabError):
    """A bound or inequality that must hold was violated beyond tolerance."""


class StageFailure(LabError):
    def __init__(self, stage, cause):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage '{stage}' failed: {cause}")

    # Seed workers hand failures back across process boundaries.
    def __reduce__(self):
        return type(self), (self.stage, self.cause)
