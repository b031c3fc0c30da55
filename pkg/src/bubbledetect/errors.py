"""Exception hierarchy shared across the package."""


class BubbleDetectError(Exception):
    """Base class for all package errors."""

    code = "error"

    def to_dict(self):
        return {"error": self.code, "message": str(self)}


class ConstructionError(BubbleDetectError, ValueError):
    code = "construction"


class UnsupportedError(BubbleDetectError):
    code = "unsupported"


class NumericalError(BubbleDetectError, ArithmeticError):
    code = "numerical"


class IndeterminateError(BubbleDetectError):
    code = "indeterminate"


class RecoveryFailedError(BubbleDetectError):
    code = "recovery_failed"


class InapplicableError(BubbleDetectError):
    code = "inapplicable"


class WidthMismatchError(BubbleDetectError, ValueError):
    code = "width_mismatch"


class CoverageError(BubbleDetectError):
    code = "coverage"

    def __init__(self, message, missing=()):
        super().__init__(message)
        self.missing = list(missing)

    def to_dict(self):
        d = super().to_dict()
        d["missing"] = [list(m) for m in self.missing]
        return d


class FormatError(BubbleDetectError):
    """Raised on corrupt, truncated or version-mismatched files."""

    code = "format"


class TrainingError(BubbleDetectError):
    code = "training"

    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint


class GenerationError(BubbleDetectError):
    """Pricing failed while building a dataset; carries the offending spec."""

    code = "generation"

    def __init__(self, message, spec=None):
        super().__init__(message)
        self.spec = spec

    def to_dict(self):
        d = super().to_dict()
        d["spec"] = self.spec
        return d
