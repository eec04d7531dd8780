"""Exception types shared across the runtime."""


class DfcollError(Exception):
    pass


class InvalidMeta(DfcollError):
    pass


class RegistryFull(DfcollError):
    pass


class AlreadyWired(DfcollError):
    pass


class ConnectorOwnershipError(DfcollError):
    """A connector was touched on behalf of a collective that does not own it."""


class CorruptContext(DfcollError):
    pass


class SubmitAfterExit(DfcollError):
    pass


class DuplicateEntry(DfcollError):
    pass


class DuplicateSubmission(DfcollError):
    """A collective was submitted again before its previous submission completed."""


class UnknownId(DfcollError):
    pass


class WatchdogTimeout(DfcollError):
    def __init__(self, message: str, events: list | None = None):
        super().__init__(message)
        self.events = events or []


class OracleMismatch(DfcollError):
    pass
