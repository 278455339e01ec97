"""Exception hierarchy.

Every error carries a short machine-readable ``code`` which is what travels
over the wire and what the CLI maps to an exit status.
"""


class ProvLedgerError(Exception):
    code = "error"

    def __init__(self, message: str = "", code: str | None = None):
        if code is not None:
            self.code = code
        super().__init__(message or self.code)

    @property
    def message(self) -> str:
        return str(self)


class InvalidArgument(ProvLedgerError):
    code = "invalid-argument"


class NotFound(ProvLedgerError):
    code = "not-found"


class BlockRejected(ProvLedgerError):
    """A block failed one of the append checks.

    ``code`` is one of wrong-number, broken-chain, bad-data-hash,
    bad-signature, unknown-client, malformed-block.
    """

    code = "malformed-block"


class RecordRejected(ProvLedgerError):
    """Payload-level validation failure (empty-key, unknown-parent, ...)."""

    code = "malformed-record"


class AdmissionRejected(ProvLedgerError):
    """The orderer refused a transaction; ``code`` names the failed check."""

    code = "admission-rejected"


class IdentityNotMember(AdmissionRejected):
    code = "unknown-client"


class Unreachable(ProvLedgerError):
    code = "transient-unreachable"


class PeerUnreachable(Unreachable):
    code = "peer-unreachable"


class BackendUnavailable(Unreachable):
    code = "backend-unavailable"


class CommitTimeout(ProvLedgerError):
    code = "commit-timeout"


class IntegrityViolation(ProvLedgerError):
    code = "integrity-violation"


class Oversize(ProvLedgerError):
    code = "oversize"


class DiskFull(ProvLedgerError):
    code = "disk-full"


class NoDataLocator(ProvLedgerError):
    code = "no-data-locator"


class BadConfig(ProvLedgerError):
    code = "bad-config"


class MalformedQuery(ProvLedgerError):
    code = "malformed-query"


class ProtocolError(ProvLedgerError):
    code = "malformed-message"


class SetupFailure(ProvLedgerError):
    code = "setup-failure"


class OrphanBlob(ProvLedgerError):
    """Ledger post failed after the blob was already stored.

    The blob stays in the store (content addressed, harmless); ``ref`` names
    it and ``cause`` is the original post error.
    """

    def __init__(self, ref, cause: ProvLedgerError):
        self.ref = ref
        self.cause = cause
        super().__init__(f"{cause} (orphaned blob {ref.locator})", code=cause.code)


# codes that mean the same thing wherever they come from
_GENERIC = {
    cls.code: cls
    for cls in (
        InvalidArgument,
        NotFound,
        IntegrityViolation,
        Oversize,
        DiskFull,
        NoDataLocator,
        MalformedQuery,
        BackendUnavailable,
    )
}
_GENERIC["unknown-type"] = ProtocolError
_GENERIC["malformed-message"] = ProtocolError


def from_wire(code: str, message: str, default=ProvLedgerError) -> ProvLedgerError:
    """Rebuild an exception from an ``error`` frame."""
    if default is AdmissionRejected and code == IdentityNotMember.code:
        return IdentityNotMember(message)
    cls = _GENERIC.get(code, default)
    return cls(message, code=code)
