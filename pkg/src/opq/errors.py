"""Exception types shared across the package."""


class OpqError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(OpqError):
    """Invalid input: bad config values, malformed containers, precondition violations."""


class ComputationError(OpqError):
    """A numerical routine cannot produce a meaningful result (degenerate data, no convergence)."""


class FormatError(OpqError):
    """An artifact or compressed file is malformed, truncated, or corrupted."""


class ArtifactIOError(OpqError):
    """Filesystem failure while reading or writing an artifact."""


class VerificationError(OpqError):
    """A verification invariant failed; the message names the invariant."""
