"""Exception types shared across the package."""


class EvomalError(Exception):
    """Base class for all package errors."""


class MalformedPe(EvomalError):
    """Input bytes are not a PE file this parser accepts."""

    def __init__(self, reason: str):
        super().__init__(reason)
        self.reason = reason


class LayoutConflict(EvomalError):
    """A modified PeFile cannot be laid out without overlapping extents."""


class ShapeMismatch(EvomalError):
    """Detector weights disagree with the detector config or the input."""


class DivergedLoss(EvomalError):
    """Training produced a non-finite loss."""


class LengthMismatch(EvomalError):
    """Two genomes of different length were crossed."""


class NoDetectedMalware(EvomalError):
    """The detector catches none of the training malware; nothing to evolve."""


class OverlapDetected(EvomalError):
    """Dataset splits that must be disjoint share entries."""


class InsufficientSamples(EvomalError):
    """Not enough samples to carve out the requested split."""


class ConfigError(EvomalError):
    """A run configuration document is invalid."""
