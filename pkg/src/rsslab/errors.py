"""Shared exception types."""


class RsslabError(Exception):
    """Base class for all package-specific errors."""


class ShapeMismatch(RsslabError):
    """Operands have incompatible shapes."""


class NotPositiveDefinite(RsslabError):
    """A matrix required to be SPD has a pivot at or below the 1e-12 floor."""


class GraphCycle(RsslabError):
    """A differentiation node is its own ancestor."""


class DegenerateBatch(RsslabError):
    """Contrastive loss needs at least two images per batch."""


class EmptyCropSet(RsslabError):
    """A multi-crop objective was given zero crops."""


class SchemeMismatch(RsslabError):
    """Crop structure does not match the requested attack scheme."""


class InvalidSpec(RsslabError):
    """An augmentation or dataset spec violates its own invariants."""


class FormatError(RsslabError):
    """A binary file does not match its declared format."""


class CountMismatch(RsslabError):
    """Image and label files disagree on the number of records."""


class LabelMismatch(RsslabError):
    """Labels are missing or inconsistent with the data."""


class ConfigError(RsslabError):
    """A run configuration is invalid."""


class NonFiniteLoss(RsslabError):
    """Training produced a NaN/inf loss; the run is aborted."""


class ZeroMatrix(RsslabError):
    """Effective rank is undefined for an all-zero matrix."""
