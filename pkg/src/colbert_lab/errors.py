"""Exception hierarchy shared by all modules.

The CLI maps these onto exit codes: configuration problems exit 1,
training divergence exits 2, I/O and file-format problems exit 3.
"""


class ColbertLabError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(ColbertLabError):
    """Matrix dimensions incompatible with the requested operation."""


class ContractError(ColbertLabError):
    """An API precondition was violated by the caller."""


class InputError(ColbertLabError):
    """Input values are out of range or otherwise unusable."""


class ConfigError(ColbertLabError):
    """Invalid or inconsistent configuration."""


class DataFormatError(ColbertLabError):
    """A data file on disk is malformed."""


class CheckpointError(ColbertLabError):
    """A checkpoint file is corrupt, truncated, or incompatible."""


class DivergenceError(ColbertLabError):
    """Training produced a non-finite loss."""
