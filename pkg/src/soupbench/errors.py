"""Exception types shared across the package."""


class SoupbenchError(Exception):
    """Base class for all soupbench errors."""


class DataError(SoupbenchError):
    """Invalid input data: malformed files, shape mismatches, broken invariants.

    The CLI maps this to exit code 2.
    """


class UsageError(SoupbenchError):
    """Bad command-line usage or configuration. CLI exit code 1."""
