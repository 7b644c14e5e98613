"""Exception types shared across the toolkit."""


class FlowguardError(Exception):
    """Base class for every error raised by this package."""


class MissingLabelColumn(FlowguardError):
    pass


class ParseError(FlowguardError):
    """Non-numeric value in a numeric column, or a malformed row.

    ``row`` is the 1-based index over data rows (header excluded).
    """

    def __init__(self, row, column, detail=""):
        self.row = row
        self.column = column
        self.detail = detail
        super().__init__(f"row {row}, column {column!r}: {detail}")


class EmptyDataset(FlowguardError):
    pass


class AllFeaturesDropped(FlowguardError):
    pass


class ClassTooSmall(FlowguardError):
    pass


class ArityMismatch(FlowguardError):
    pass


class DivergedTraining(FlowguardError):
    pass


class MixedLabels(FlowguardError):
    pass


class ImmutableCoordinate(FlowguardError):
    pass


class NonFiniteGradient(FlowguardError):
    pass


class NoEligibleCoordinates(FlowguardError):
    pass


class ConfigError(FlowguardError):
    pass


class StageError(FlowguardError):
    """Wraps a failure inside one pipeline stage with the stage name."""

    def __init__(self, stage, cause):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage {stage!r} failed: {cause}")
