"""Exception hierarchy for the segmentation pipeline.

Exit-code mapping for the CLI lives in cli.py; library code raises these
directly and never calls sys.exit.
"""


class CmesegError(Exception):
    """Base class for all pipeline errors."""


class ConfigError(CmesegError):
    """Bad or inconsistent configuration (unknown keys, out-of-range values)."""


class ShapeMismatch(CmesegError):
    """Tensor extents violate an operation's preconditions."""


class InputTooSmall(CmesegError):
    """Network input below the minimum spatial extent."""


class UnsupportedGeometry(CmesegError):
    """Kernel geometry outside what the operation supports."""


class NoForwardState(CmesegError):
    """backward() called before a caching forward() pass."""


class BadWidthScale(CmesegError):
    """Width scale does not yield positive integer channel counts."""


class CorruptCheckpoint(CmesegError):
    """Checkpoint file fails magic/version/structure validation."""


class DimsMismatch(CmesegError):
    """Checkpoint or parameter inventory does not match the target graph."""


class BadCertainty(CmesegError):
    """Ground-truth certainty outside the open interval (1/K, 1)."""


class NotNormalized(CmesegError):
    """Probability map channels do not sum to one."""


class TooLarge(CmesegError):
    """Problem instance beyond an exhaustive-enumeration bound."""


class ImageTooSmall(CmesegError):
    """Image smaller than the denoising patch size."""


class NoRetinaFound(CmesegError):
    """Row-intensity profile too dark to locate a retinal band."""


class MissingMask(CmesegError):
    """Dataset sample lacks its mandatory grader-1 mask."""


class ExtentMismatch(CmesegError):
    """Image and mask extents differ."""


class EmptyDataset(CmesegError):
    """No samples found where some were required."""


class BadSpec(CmesegError):
    """Augmentation specification violates its invariants."""


class LengthMismatch(CmesegError):
    """Paired vectors have different lengths."""
