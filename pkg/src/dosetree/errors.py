"""Exception hierarchy for the dosetree package."""


class DoseTreeError(Exception):
    """Base class for all dosetree errors."""


class SchemaError(DoseTreeError):
    """A required column is missing or the schema is malformed."""


class ParseError(DoseTreeError):
    """A cell could not be parsed as a number."""

    def __init__(self, message, row=None, column=None):
        super().__init__(message)
        self.row = row
        self.column = column


class DegenerateDoseError(DoseTreeError):
    """All observed doses are identical; no affine rescaling exists."""


class InsufficientDataError(DoseTreeError):
    """Too few samples to fit a model."""


class DegeneratePropensityError(DoseTreeError):
    """Dose residuals have (near) zero variance."""


class DegenerateKernelError(DoseTreeError):
    """A kernel row is all zeros."""


class BandwidthSelectionError(DoseTreeError):
    """No candidate bandwidth produced a valid LOO criterion."""


class KernelCalibrationError(DoseTreeError):
    """Row-sum calibration target unreachable within the sigma bounds."""


class EmptyNodeError(DoseTreeError):
    """A tree node was given an empty sample subset."""


class PipelineError(DoseTreeError):
    """A stage of the fitting pipeline failed."""
