"""Exception taxonomy shared across the package.

Every public operation raises one of these (or a subclass) instead of a bare
ValueError, so callers and the CLI can map failures to exit codes without
string matching.
"""


class FocalCirError(Exception):
    """Base class for all package errors."""


class ConfigError(FocalCirError):
    """Malformed, unknown, or out-of-range configuration."""


class DataError(FocalCirError):
    """Missing or inconsistent benchmark data on disk."""


class DimensionError(FocalCirError):
    """Shape mismatch; the message names both offending shapes."""


class ContractError(FocalCirError):
    """A call-site precondition was violated (non-scalar backward root,
    non-unit rows fed to the contrastive loss, bad k, ...)."""


class DegenerateInputError(FocalCirError):
    """Numerically degenerate input, e.g. normalizing a zero vector."""


class EmptyMaskError(FocalCirError):
    """A bounding box that covers no patch center."""


class AlignmentError(FocalCirError):
    """Region mask grid does not match the patch grid it is applied to."""


class GalleryError(FocalCirError):
    """Gallery construction could not satisfy its invariants."""


class PerturbationError(FocalCirError):
    """Requested bounding-box perturbation is infeasible."""


class CheckpointError(FocalCirError):
    """Unreadable or incompatible checkpoint file."""
