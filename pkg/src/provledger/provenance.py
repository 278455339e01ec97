"""Provenance chaincode: the record model, Post, and the built-in queries.

Everything here is a pure function of committed state so that every peer
computes the same answers.
"""

from __future__ import annotations

import base64
import hashlib
from collections import deque
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, NamedTuple

from .codec import DecodeError, Reader, Writer
from .errors import InvalidArgument, NotFound, RecordRejected

if TYPE_CHECKING:
    from .ledger import HistoryIndex, Transaction, WorldState

CHECKSUM_SIZE = 32
DEFAULT_CUSTOM_LIMIT = 4096
DEFAULT_MAX_LINEAGE_NODES = 10_000


class Version(NamedTuple):
    block: int
    tx_index: int


class ParentRef(NamedTuple):
    key: str
    version: Version

    def to_json(self) -> dict:
        return {"key": self.key, "block": self.version.block, "tx_index": self.version.tx_index}

    @classmethod
    def from_json(cls, d: dict) -> ParentRef:
        return cls(str(d["key"]), Version(int(d["block"]), int(d["tx_index"])))


@dataclass(frozen=True)
class ProvenanceRecord:
    key: str
    checksum: bytes
    data_locator: str = ""
    creator_id: str = ""
    parents: tuple[ParentRef, ...] = ()
    custom: bytes = b""
    timestamp: int = 0

    def __post_init__(self):
        parents = tuple(
            p if isinstance(p, ParentRef) else ParentRef(p[0], Version(*p[1]))
            for p in self.parents
        )
        object.__setattr__(self, "parents", parents)

    def to_bytes(self) -> bytes:
        w = Writer().text(self.key).bytes(self.checksum).text(self.data_locator)
        w.text(self.creator_id).u32(len(self.parents))
        for p in self.parents:
            w.text(p.key).u64(p.version.block).u32(p.version.tx_index)
        return w.bytes(self.custom).u64(self.timestamp).getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> ProvenanceRecord:
        r = Reader(data)
        key, checksum, locator, creator = r.text(), r.bytes(), r.text(), r.text()
        parents = tuple(
            ParentRef(r.text(), Version(r.u64(), r.u32())) for _ in range(r.u32())
        )
        custom, ts = r.bytes(), r.u64()
        r.done()
        return cls(key, checksum, locator, creator, parents, custom, ts)

    def to_json(self) -> dict:
        return {
            "key": self.key,
            "checksum": self.checksum.hex(),
            "data_locator": self.data_locator,
            "creator_id": self.creator_id,
            "parents": [p.to_json() for p in self.parents],
            "custom": base64.b64encode(self.custom).decode("ascii"),
            "timestamp": self.timestamp,
        }

    @classmethod
    def from_json(cls, d: dict) -> ProvenanceRecord:
        try:
            return cls(
                key=str(d["key"]),
                checksum=bytes.fromhex(d["checksum"]),
                data_locator=str(d.get("data_locator", "")),
                creator_id=str(d.get("creator_id", "")),
                parents=tuple(ParentRef.from_json(p) for p in d.get("parents", [])),
                custom=base64.b64decode(d.get("custom", ""), validate=True),
                timestamp=int(d.get("timestamp", 0)),
            )
        except (KeyError, ValueError, TypeError) as exc:
            raise InvalidArgument(f"bad record json: {exc}") from exc


def validate_record(history: HistoryIndex, record: ProvenanceRecord,
                    custom_limit: int = DEFAULT_CUSTOM_LIMIT) -> None:
    """Raise RecordRejected unless ``record`` may be committed on top of ``history``.

    ``history`` only needs a ``has_version(key, version)`` method, which lets
    the orderer validate against committed plus pending transactions.
    """
    if not record.key:
        raise RecordRejected("record key is empty", code="empty-key")
    if len(record.checksum) != CHECKSUM_SIZE:
        raise RecordRejected(
            f"checksum must be {CHECKSUM_SIZE} bytes, got {len(record.checksum)}",
            code="malformed-checksum",
        )
    if len(record.custom) > custom_limit:
        raise RecordRejected(
            f"custom field is {len(record.custom)} bytes, limit {custom_limit}",
            code="oversize-custom",
        )
    for p in record.parents:
        if not history.has_version(p.key, p.version):
            raise RecordRejected(
                f"parent {p.key}@{p.version.block}.{p.version.tx_index} is not committed",
                code="unknown-parent",
            )


def decode_and_validate(history: HistoryIndex, tx: Transaction,
                        custom_limit: int = DEFAULT_CUSTOM_LIMIT) -> ProvenanceRecord:
    """Record checks shared by admission and apply."""
    try:
        record = ProvenanceRecord.from_bytes(tx.record_payload)
    except DecodeError as exc:
        raise RecordRejected(f"undecodable record: {exc}") from exc
    if record.key != tx.key:
        raise RecordRejected("record key differs from transaction key")
    if record.creator_id != tx.client_id:
        raise RecordRejected("record creator differs from signing client")
    validate_record(history, record, custom_limit)
    return record


def exec_post(state: WorldState, history: HistoryIndex, tx: Transaction, version: Version,
              timestamp: int, custom_limit: int = DEFAULT_CUSTOM_LIMIT) -> Version | None:
    """Apply one committed post. Returns its version, or None for a no-op tombstone.

    A record that no longer validates at apply time is kept in history as an
    invalid entry and leaves world state untouched, so replicas stay identical.
    """
    try:
        record = decode_and_validate(history, tx, custom_limit)
    except RecordRejected as exc:
        history.append(tx.key, version, tx.record_payload, tx.tx_id, timestamp,
                       record=None, valid=False, reason=exc.code)
        return None
    state.put(tx.key, record, tx.record_payload, version)
    history.append(tx.key, version, tx.record_payload, tx.tx_id, timestamp, record=record)
    return version


def exec_get(state: WorldState, key: str) -> tuple[ProvenanceRecord, Version]:
    entry = state.get(key)
    if entry is None:
        raise NotFound(f"no record for key {key!r}")
    return entry.record, entry.version


@dataclass(frozen=True)
class HistoryVersion:
    version: Version
    record: ProvenanceRecord
    tx_id: bytes
    timestamp: int

    def to_json(self) -> dict:
        return {
            "block": self.version.block,
            "tx_index": self.version.tx_index,
            "tx_id": self.tx_id.hex(),
            "timestamp": self.timestamp,
            "record": self.record.to_json(),
        }

    @classmethod
    def from_json(cls, d: dict) -> HistoryVersion:
        return cls(
            Version(int(d["block"]), int(d["tx_index"])),
            ProvenanceRecord.from_json(d["record"]),
            bytes.fromhex(d["tx_id"]),
            int(d["timestamp"]),
        )


@dataclass(frozen=True)
class KeyHistory:
    key: str
    versions: tuple[HistoryVersion, ...]

    def to_json(self) -> dict:
        return {"key": self.key, "versions": [v.to_json() for v in self.versions]}

    @classmethod
    def from_json(cls, d: dict) -> KeyHistory:
        return cls(str(d["key"]), tuple(HistoryVersion.from_json(v) for v in d["versions"]))


def exec_get_history(history: HistoryIndex, key: str) -> KeyHistory:
    versions = tuple(
        HistoryVersion(e.version, e.record, e.tx_id, e.timestamp)
        for e in history.entries(key)
        if e.valid
    )
    if not versions:
        raise NotFound(f"no history for key {key!r}")
    return KeyHistory(key, versions)


@dataclass(frozen=True)
class LineageNode:
    key: str
    version: Version
    record: ProvenanceRecord

    @property
    def ref(self) -> ParentRef:
        return ParentRef(self.key, self.version)


@dataclass(frozen=True)
class LineageGraph:
    nodes: tuple[LineageNode, ...]
    edges: tuple[tuple[ParentRef, ParentRef], ...]  # (child, parent)
    truncated: bool = False
    root: ParentRef | None = field(default=None)

    def node_refs(self) -> set[ParentRef]:
        return {n.ref for n in self.nodes}

    def edge_set(self) -> set[tuple[ParentRef, ParentRef]]:
        return set(self.edges)

    def to_json(self) -> dict:
        return {
            "root": self.root.to_json() if self.root else None,
            "nodes": [
                {**n.ref.to_json(), "record": n.record.to_json()} for n in self.nodes
            ],
            "edges": [{"child": c.to_json(), "parent": p.to_json()} for c, p in self.edges],
            "truncated": self.truncated,
        }

    @classmethod
    def from_json(cls, d: dict) -> LineageGraph:
        nodes = tuple(
            LineageNode(str(n["key"]), Version(int(n["block"]), int(n["tx_index"])),
                        ProvenanceRecord.from_json(n["record"]))
            for n in d["nodes"]
        )
        edges = tuple(
            (ParentRef.from_json(e["child"]), ParentRef.from_json(e["parent"]))
            for e in d["edges"]
        )
        root = ParentRef.from_json(d["root"]) if d.get("root") else None
        return cls(nodes, edges, bool(d.get("truncated", False)), root)


def exec_get_lineage(state: WorldState, history: HistoryIndex, key: str,
                     version: Version | None = None, max_depth: int | None = None,
                     max_nodes: int = DEFAULT_MAX_LINEAGE_NODES) -> LineageGraph:
    """Breadth-first closure over parent references.

    Nodes at ``max_depth`` are included but not expanded, so their outgoing
    edges are omitted. Output is sorted by (key, version).
    """
    if max_depth is not None and max_depth < 0:
        raise InvalidArgument("max_depth must be >= 0")
    if version is None:
        _, version = exec_get(state, key)
    root_entry = history.lookup(key, version)
    if root_entry is None:
        raise NotFound(f"no record {key!r} at {tuple(version)}")

    root = ParentRef(key, Version(*version))
    found = {root: root_entry.record}
    edges = []
    truncated = False
    queue = deque([(root, 0)])
    while queue:
        ref, depth = queue.popleft()
        if max_depth is not None and depth >= max_depth:
            continue
        for parent in found[ref].parents:
            if parent not in found:
                if len(found) >= max_nodes:
                    truncated = True
                    continue
                found[parent] = history.lookup(parent.key, parent.version).record
                queue.append((parent, depth + 1))
            edges.append((ref, parent))

    nodes = tuple(LineageNode(r.key, r.version, rec) for r, rec in sorted(found.items()))
    return LineageGraph(nodes, tuple(sorted(set(edges))), truncated, root)


def verify_item(record: ProvenanceRecord, content: bytes) -> bool:
    return hashlib.sha256(content).digest() == record.checksum
