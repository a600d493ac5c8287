"""Exception hierarchy shared across the toolkit.

The CLI maps these onto exit codes: usage errors exit 2, data errors 3,
numeric failures 4.
"""


class SiplKitError(Exception):
    """Base class for all toolkit errors."""


class ShapeMismatch(SiplKitError):
    """Two arrays that must share a shape do not."""


class ShapeError(SiplKitError):
    """An input shape violates a structural precondition (e.g. divisibility)."""


class UnknownKind(SiplKitError):
    """A degradation kind outside the supported enum."""


class DataError(SiplKitError):
    """Unreadable/unwritable corpus data, missing files, bad manifests."""


class MissingGroundTruth(SiplKitError):
    """GT-guided inference requested without a ground-truth image."""


class SpecNotHeldOut(SiplKitError):
    """An out-of-distribution probe matches a combination seen in training."""


class NonFiniteLoss(SiplKitError):
    """Training loss became NaN/Inf; carries a diagnostic payload."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class NonFiniteGradient(SiplKitError):
    """An analytic gradient evaluated to NaN/Inf during a gradient check."""


class ImageTooSmall(SiplKitError):
    """Image smaller than the metric's window size."""


class ConfigError(SiplKitError):
    """Malformed run configuration (unknown keys, invalid values)."""
