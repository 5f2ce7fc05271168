"""Exception hierarchy shared by every module of the package."""


class SsdRerankError(Exception):
    """Base class for all package errors."""


class InvalidInputError(SsdRerankError, ValueError):
    """An argument violates an operation's precondition."""


class InvalidConfigError(SsdRerankError, ValueError):
    """A configuration is inconsistent with the artifact it is applied to."""


class InvalidStateError(SsdRerankError, RuntimeError):
    """An object was used out of its lifecycle order."""


class FormatError(SsdRerankError, ValueError):
    """A persisted file does not parse."""


class DataIntegrityError(SsdRerankError, RuntimeError):
    """Two artifacts that must describe the same corpus disagree."""


class StoreIOError(SsdRerankError, OSError):
    """A read against the embedding store failed or came back short."""


class QueryError(SsdRerankError):
    """Wraps a failure raised while executing one query of a batch."""

    def __init__(self, query_id, cause):
        super().__init__(f"query {query_id!r} failed: {cause}")
        self.query_id = query_id
        self.cause = cause
