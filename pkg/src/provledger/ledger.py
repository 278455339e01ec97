"""Hash-chained block storage, world state and per-key history.

On-disk layout of a ledger directory::

    blocks/<number>.blk   canonical block bytes
    blocks/HEIGHT         decimal height

Header layout (80 bytes): number u64 | prev_hash 32 | data_hash 32 | timestamp u64.
"""

from __future__ import annotations

import contextlib
import dataclasses
import hashlib
import os
import threading
from dataclasses import dataclass, field
from pathlib import Path

from . import identity
from .codec import DecodeError, Reader, Writer
from .errors import BlockRejected, NotFound
from .identity import KeyPair, MembershipList, Role
from .provenance import DEFAULT_CUSTOM_LIMIT, ProvenanceRecord, Version, exec_post

HASH_SIZE = 32
NONCE_SIZE = 16
ZERO_HASH = bytes(HASH_SIZE)
OP_POST = "post"
OPERATIONS = (OP_POST,)


def sha256(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


@dataclass(frozen=True)
class Transaction:
    client_id: str
    operation: str
    key: str
    nonce: bytes
    record_payload: bytes
    client_signature: bytes = b""

    @property
    def payload_bytes(self) -> bytes:
        """The canonical bytes that are hashed into ``tx_id`` and signed."""
        return (
            Writer()
            .text(self.client_id)
            .text(self.operation)
            .text(self.key)
            .fixed(self.nonce, NONCE_SIZE)
            .bytes(self.record_payload)
            .getvalue()
        )

    @property
    def tx_id(self) -> bytes:
        return sha256(self.payload_bytes)

    def to_bytes(self) -> bytes:
        return Writer().bytes(self.payload_bytes).bytes(self.client_signature).getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> Transaction:
        r = Reader(data)
        payload, sig = r.bytes(), r.bytes()
        r.done()
        p = Reader(payload)
        tx = cls(p.text(), p.text(), p.text(), p.fixed(NONCE_SIZE), p.bytes(), sig)
        p.done()
        return tx

    def record(self) -> ProvenanceRecord:
        return ProvenanceRecord.from_bytes(self.record_payload)


def make_transaction(key: KeyPair, record: ProvenanceRecord, nonce: bytes | None = None) -> Transaction:
    unsigned = Transaction(
        client_id=key.id,
        operation=OP_POST,
        key=record.key,
        nonce=os.urandom(NONCE_SIZE) if nonce is None else nonce,
        record_payload=record.to_bytes(),
    )
    sig = identity.sign(key, unsigned.payload_bytes)
    return dataclasses.replace(unsigned, client_signature=sig)


def check_transaction(tx: Transaction, members: MembershipList) -> None:
    """Signature and membership checks shared by admission and block validation."""
    if not identity.check_membership(members, tx.client_id, Role.CLIENT):
        raise BlockRejected(f"{tx.client_id!r} is not an enrolled client", code="unknown-client")
    if tx.operation not in OPERATIONS:
        raise BlockRejected(f"unknown operation {tx.operation!r}", code="malformed-block")
    if not identity.verify(members.get(tx.client_id), tx.payload_bytes, tx.client_signature):
        raise BlockRejected(f"bad client signature on tx {tx.tx_id.hex()[:16]}", code="bad-signature")


@dataclass(frozen=True)
class BlockHeader:
    number: int
    prev_hash: bytes
    data_hash: bytes
    timestamp: int

    def to_bytes(self) -> bytes:
        return (
            Writer()
            .u64(self.number)
            .fixed(self.prev_hash, HASH_SIZE)
            .fixed(self.data_hash, HASH_SIZE)
            .u64(self.timestamp)
            .getvalue()
        )


HEADER_SIZE = 8 + HASH_SIZE + HASH_SIZE + 8


def block_hash(header: BlockHeader) -> bytes:
    return sha256(header.to_bytes())


def data_hash(transactions) -> bytes:
    w = Writer().u32(len(transactions))
    for tx in transactions:
        w.bytes(tx.to_bytes())
    return sha256(w.getvalue())


@dataclass(frozen=True)
class Block:
    header: BlockHeader
    transactions: tuple[Transaction, ...]
    orderer_signature: bytes

    @property
    def number(self) -> int:
        return self.header.number

    def to_bytes(self) -> bytes:
        w = Writer().fixed(self.header.to_bytes(), HEADER_SIZE).u32(len(self.transactions))
        for tx in self.transactions:
            w.bytes(tx.to_bytes())
        return w.bytes(self.orderer_signature).getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> Block:
        r = Reader(data)
        header = BlockHeader(r.u64(), r.fixed(HASH_SIZE), r.fixed(HASH_SIZE), r.u64())
        txs = tuple(Transaction.from_bytes(r.bytes()) for _ in range(r.u32()))
        sig = r.bytes()
        r.done()
        return cls(header, txs, sig)

    def to_json(self) -> dict:
        h = self.header
        return {
            "number": h.number,
            "hash": block_hash(h).hex(),
            "prev_hash": h.prev_hash.hex(),
            "data_hash": h.data_hash.hex(),
            "timestamp": h.timestamp,
            "orderer_signature": self.orderer_signature.hex(),
            "transactions": [
                {
                    "tx_id": tx.tx_id.hex(),
                    "client_id": tx.client_id,
                    "operation": tx.operation,
                    "key": tx.key,
                    "nonce": tx.nonce.hex(),
                    "client_signature": tx.client_signature.hex(),
                    "record": _record_json_or_raw(tx.record_payload),
                }
                for tx in self.transactions
            ],
        }


def _record_json_or_raw(payload: bytes):
    try:
        return ProvenanceRecord.from_bytes(payload).to_json()
    except DecodeError:
        return {"raw": payload.hex()}


def make_block(orderer_key: KeyPair, number: int, prev_hash: bytes, transactions,
               timestamp: int) -> Block:
    transactions = tuple(transactions)
    header = BlockHeader(number, prev_hash, data_hash(transactions), timestamp)
    return Block(header, transactions, identity.sign(orderer_key, header.to_bytes()))


def make_genesis(orderer_key: KeyPair) -> Block:
    # timestamp 0 keeps genesis identical on every fresh orderer with the same key
    return make_block(orderer_key, 0, ZERO_HASH, (), 0)


def check_block(block: Block, number: int, prev_header: BlockHeader | None,
                members: MembershipList) -> None:
    """Raise BlockRejected naming the first failed check.

    Order: broken-chain, wrong-number, bad-data-hash, bad-signature (orderer),
    then per-transaction unknown-client / bad-signature.
    """
    h = block.header
    expected_prev = ZERO_HASH if prev_header is None else block_hash(prev_header)
    if h.prev_hash != expected_prev:
        raise BlockRejected(f"block {number}: prev_hash does not match", code="broken-chain")
    if h.number != number:
        raise BlockRejected(f"expected block {number}, got {h.number}", code="wrong-number")
    if h.data_hash != data_hash(block.transactions):
        raise BlockRejected(f"block {number}: data hash mismatch", code="bad-data-hash")
    if not identity.verify(members.orderer, h.to_bytes(), block.orderer_signature):
        raise BlockRejected(f"block {number}: bad orderer signature", code="bad-signature")
    if number > 0 and not block.transactions:
        raise BlockRejected(f"block {number}: empty non-genesis block", code="malformed-block")
    for tx in block.transactions:
        check_transaction(tx, members)


@dataclass(frozen=True)
class StateEntry:
    record: ProvenanceRecord
    payload: bytes
    version: Version


class WorldState:
    """Latest record per key."""

    def __init__(self):
        self.entries: dict[str, StateEntry] = {}

    def put(self, key: str, record: ProvenanceRecord, payload: bytes, version: Version) -> None:
        self.entries[key] = StateEntry(record, payload, version)

    def get(self, key: str) -> StateEntry | None:
        return self.entries.get(key)

    def __len__(self):
        return len(self.entries)


@dataclass(frozen=True)
class HistoryEntry:
    version: Version
    payload: bytes
    tx_id: bytes
    timestamp: int
    record: ProvenanceRecord | None
    valid: bool = True
    reason: str = ""


@dataclass
class HistoryIndex:
    """Every committed post per key, in commit order (including tombstones)."""

    _by_key: dict[str, list[HistoryEntry]] = field(default_factory=dict)
    _by_version: dict[tuple[str, Version], HistoryEntry] = field(default_factory=dict)

    def append(self, key, version, payload, tx_id, timestamp, record=None, valid=True, reason=""):
        entry = HistoryEntry(Version(*version), payload, tx_id, timestamp, record, valid, reason)
        self._by_key.setdefault(key, []).append(entry)
        if valid:
            self._by_version[(key, entry.version)] = entry

    def entries(self, key: str) -> list[HistoryEntry]:
        return self._by_key.get(key, [])

    def lookup(self, key: str, version: Version) -> HistoryEntry | None:
        return self._by_version.get((key, Version(*version)))

    def has_version(self, key: str, version: Version) -> bool:
        return (key, Version(*version)) in self._by_version

    def keys(self):
        return self._by_key.keys()

    def total_entries(self) -> int:
        return sum(len(v) for v in self._by_key.values())


def apply_block(state: WorldState, history: HistoryIndex, block: Block,
                custom_limit: int = DEFAULT_CUSTOM_LIMIT) -> tuple[WorldState, HistoryIndex]:
    """Apply an already validated block's transactions in order (in place)."""
    for i, tx in enumerate(block.transactions):
        exec_post(state, history, tx, Version(block.number, i), block.header.timestamp, custom_limit)
    return state, history


def state_digest(state: WorldState) -> bytes:
    w = Writer()
    for key in sorted(state.entries, key=lambda k: k.encode("utf-8")):
        e = state.entries[key]
        w.text(key).u64(e.version.block).u32(e.version.tx_index).bytes(e.payload)
    return sha256(w.getvalue())


def _atomic_write(path: Path, data: bytes, fsync: bool = False) -> None:
    tmp = path.with_name(f".{path.name}.{os.getpid()}.{threading.get_ident()}.tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
        if fsync:
            fh.flush()
            os.fsync(fh.fileno())
    os.replace(tmp, path)


def block_path(directory, number: int) -> Path:
    return Path(directory) / "blocks" / f"{number}.blk"


def read_height(directory) -> int:
    p = Path(directory) / "blocks" / "HEIGHT"
    if not p.exists():
        return 0
    return int(p.read_text().strip() or 0)


class LedgerStore:
    """A persisted chain plus the world state and history derived from it.

    One writer (``append_block``) and many readers; readers wrap their work in
    ``with store.reading():`` to see exactly one committed height.
    """

    def __init__(self, directory, members: MembershipList,
                 custom_limit: int = DEFAULT_CUSTOM_LIMIT, fsync: bool = False):
        self.directory = Path(directory)
        self.members = members
        self.custom_limit = custom_limit
        self.fsync = fsync
        self.state = WorldState()
        self.history = HistoryIndex()
        self._headers: list[BlockHeader] = []
        self._lock = threading.RLock()
        (self.directory / "blocks").mkdir(parents=True, exist_ok=True)
        self._load()

    def _load(self) -> None:
        for n in range(read_height(self.directory)):
            try:
                block = Block.from_bytes(block_path(self.directory, n).read_bytes())
            except (OSError, DecodeError) as exc:
                raise BlockRejected(f"cannot load block {n}: {exc}") from exc
            check_block(block, n, self._headers[-1] if self._headers else None, self.members)
            self._apply(block)

    def _apply(self, block: Block) -> None:
        apply_block(self.state, self.history, block, self.custom_limit)
        self._headers.append(block.header)

    @property
    def height(self) -> int:
        return len(self._headers)

    @property
    def last_header(self) -> BlockHeader | None:
        return self._headers[-1] if self._headers else None

    def header(self, number: int) -> BlockHeader:
        if not 0 <= number < self.height:
            raise NotFound(f"block {number} not found")
        return self._headers[number]

    @contextlib.contextmanager
    def reading(self):
        with self._lock:
            yield self

    def append_block(self, block: Block) -> int:
        """Validate, persist and apply ``block``. Returns the new height."""
        with self._lock:
            check_block(block, self.height, self.last_header, self.members)
            _atomic_write(block_path(self.directory, block.number), block.to_bytes(), self.fsync)
            _atomic_write(self.directory / "blocks" / "HEIGHT",
                          str(block.number + 1).encode(), self.fsync)
            self._apply(block)
            return self.height

    def block_bytes(self, number: int) -> bytes:
        with self._lock:
            if not 0 <= number < self.height:
                raise NotFound(f"block {number} not found")
            return block_path(self.directory, number).read_bytes()

    def get_block(self, number: int) -> Block:
        return Block.from_bytes(self.block_bytes(number))

    def state_digest(self) -> bytes:
        with self._lock:
            return state_digest(self.state)


def get_block(store: LedgerStore, number: int) -> Block:
    return store.get_block(number)


def append_block(store: LedgerStore, block: Block) -> int:
    return store.append_block(block)


@dataclass(frozen=True)
class ChainReport:
    ok: bool
    height: int
    failed_block: int | None = None
    check: str | None = None
    detail: str = ""

    def to_json(self) -> dict:
        return dict(self.__dict__)


def verify_chain(directory, members: MembershipList) -> ChainReport:
    """Re-check every persisted block from disk. Read-only."""
    height = read_height(directory)
    prev: BlockHeader | None = None
    for n in range(height):
        path = block_path(directory, n)
        try:
            raw = path.read_bytes()
        except OSError as exc:
            return ChainReport(False, height, n, "missing-block", str(exc))
        try:
            block = Block.from_bytes(raw)
        except DecodeError as exc:
            return ChainReport(False, height, n, "malformed-block", str(exc))
        try:
            check_block(block, n, prev, members)
        except BlockRejected as exc:
            return ChainReport(False, height, n, exc.code, str(exc))
        prev = block.header
    return ChainReport(True, height)
