"""Exception types shared across the package."""


class FedVoteError(Exception):
    """Base class for all package errors."""


class InputError(FedVoteError, ValueError):
    """Malformed arguments: dimension mismatches, empty batches and the like."""


class ConfigError(FedVoteError, ValueError):
    """A configuration value violates one of its invariants."""


class ProtocolError(FedVoteError, RuntimeError):
    """An operation was invoked out of order (e.g. a detector call mid-interval)."""


class IdxParseError(FedVoteError, ValueError):
    """An IDX file could not be parsed.

    Attributes:
        field: Name of the offending header field or section
            (``"magic"``, ``"count"``, ``"dims"``, ``"data"``).
    """

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class EmptyTrustSetError(FedVoteError, RuntimeError):
    """Every agent is currently ignored, so there is nothing to aggregate."""


class ReplicationError(FedVoteError, RuntimeError):
    """A replication failed; carries the seed needed to reproduce it."""

    def __init__(self, replication: int, seed: int, cause: Exception):
        super().__init__(f"replication {replication} (master seed {seed}) failed: {cause}")
        self.replication = replication
        self.seed = seed
