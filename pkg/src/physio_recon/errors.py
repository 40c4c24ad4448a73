"""Exception types shared across the package.

The CLI maps these onto its exit codes: UsageError -> 64, DataError -> 1,
HashMismatchError -> 2, NumericError -> 3.
"""


class PhysioReconError(Exception):
    """Base class for all package errors."""


class UsageError(PhysioReconError):
    """Invalid command line or configuration values."""


class DataError(PhysioReconError):
    """Malformed or inconsistent input data (files, manifests, series)."""


class ShapeError(PhysioReconError):
    """Incompatible array shapes passed to a tensor operation."""


class HashMismatchError(PhysioReconError):
    """Preprocessing-settings hash does not match between producer and consumer."""


class NumericError(PhysioReconError):
    """Non-finite value encountered where a finite one is required."""
