"""Client SDK: Init, Post, Get, StoreData, GetData plus history and lineage.

A session signs transactions with its identity, submits them to the orderer,
and confirms commits by polling its peer for the transaction id in the
key's history. Sessions are not thread-safe; use one per thread.
"""

from __future__ import annotations

import base64
import hashlib
import time
from dataclasses import dataclass
from pathlib import Path

from . import wire
from .config import Config, load_config
from .errors import (
    AdmissionRejected,
    BadConfig,
    CommitTimeout,
    NoDataLocator,
    NotFound,
    OrphanBlob,
    PeerUnreachable,
    ProvLedgerError,
    Unreachable,
    IntegrityViolation,
)
from .identity import KeyPair, Role, load_keypair, load_membership
from .ledger import Block, Transaction, make_transaction
from .offchain import BlobRef, StoreBackend, open_backend
from .provenance import (
    KeyHistory,
    LineageGraph,
    ParentRef,
    ProvenanceRecord,
    Version,
    verify_item,
)

DEFAULT_COMMIT_TIMEOUT = 10.0
DEFAULT_POLL_INTERVAL = 0.05


@dataclass(frozen=True)
class PendingTx:
    tx_id: bytes
    key: str
    projected: Version

    @property
    def ref(self) -> ParentRef:
        """Parent reference usable before the transaction is cut into a block."""
        return ParentRef(self.key, self.projected)


@dataclass(frozen=True)
class PostResult:
    key: str
    version: Version
    tx_id: bytes

    @property
    def ref(self) -> ParentRef:
        return ParentRef(self.key, self.version)


@dataclass(frozen=True)
class GetResult:
    record: ProvenanceRecord
    version: Version
    height: int


@dataclass(frozen=True)
class StoreResult:
    key: str
    blob: BlobRef
    version: Version
    tx_id: bytes

    @property
    def ref(self) -> ParentRef:
        return ParentRef(self.key, self.version)


class ClientSession:
    def __init__(self, identity: KeyPair, orderer: str, peers: list[str] | str,
                 backend: StoreBackend | None = None,
                 commit_timeout: float = DEFAULT_COMMIT_TIMEOUT,
                 poll_interval: float = DEFAULT_POLL_INTERVAL,
                 connect_timeout: float = 10.0, submit_retries: int = 3):
        if isinstance(peers, str):
            peers = [peers]
        if not peers:
            raise BadConfig("at least one peer address is required")
        self.identity = identity
        self.backend = backend
        self.commit_timeout = commit_timeout
        self.poll_interval = poll_interval
        self.submit_retries = submit_retries
        self._orderer = wire.Connection(orderer, connect_timeout)
        self._peers = [wire.Connection(p, connect_timeout, unreachable=PeerUnreachable)
                       for p in peers]

    @classmethod
    def from_config(cls, cfg: Config, check_peer: bool = True) -> ClientSession:
        members = load_membership(cfg.path("membership")) if "membership" in cfg else None
        identity = load_keypair(cfg.path("key"), cfg.require("id"), members, Role.CLIENT)
        backend = None
        if cfg.get("blobstore"):
            spec = cfg["blobstore"]
            if not spec.startswith("tcp://"):
                spec = str(cfg.path("blobstore"))
            backend = open_backend(spec, cfg.get("backend_id", "local"),
                                   timeout=cfg.float("blob_timeout_s", 30.0))
        session = cls(
            identity,
            cfg.require("orderer"),
            cfg.list("peers") or cfg.list("peer"),
            backend,
            commit_timeout=cfg.float("commit_timeout_s", DEFAULT_COMMIT_TIMEOUT),
            poll_interval=cfg.float("poll_interval_ms", DEFAULT_POLL_INTERVAL * 1000) / 1000,
            connect_timeout=cfg.float("connect_timeout_s", 10.0),
        )
        if check_peer:
            session.height()
        return session

    # -- plumbing --------------------------------------------------------

    @property
    def peer_count(self) -> int:
        return len(self._peers)

    def query(self, q: dict, peer: int = 0) -> dict:
        return self._peers[peer].request(wire.QUERY, q, expect=wire.QUERY_RESULT)

    def height(self, peer: int = 0) -> int:
        return int(self.query({"op": "height"}, peer)["height"])

    def orderer_height(self) -> int:
        return int(self._orderer.request(wire.QUERY, {"op": "height"},
                                         expect=wire.QUERY_RESULT)["height"])

    def state_digest(self, peer: int = 0) -> tuple[bytes, int]:
        body = self.query({"op": "state_digest"}, peer)
        return bytes.fromhex(body["digest"]), int(body["height"])

    def get_block(self, number: int, peer: int = 0) -> Block:
        body = self.query({"op": "block", "number": number}, peer)
        return Block.from_bytes(base64.b64decode(body["block"]))

    def close(self) -> None:
        self._orderer.close()
        for p in self._peers:
            p.close()
        if self.backend is not None:
            self.backend.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    # -- writes ----------------------------------------------------------

    def build_record(self, key, checksum, data_locator="", parents=(), custom=b"") -> ProvenanceRecord:
        return ProvenanceRecord(
            key=key,
            checksum=checksum,
            data_locator=data_locator,
            creator_id=self.identity.id,
            parents=tuple(parents),
            custom=bytes(custom),
            timestamp=int(time.time() * 1000),
        )

    def submit_tx(self, tx: Transaction) -> PendingTx:
        """Send a signed transaction; retried on transport failure (the
        orderer deduplicates by tx id, so a retry never commits twice)."""
        body = {"tx": base64.b64encode(tx.to_bytes()).decode("ascii")}
        attempt = 0
        while True:
            try:
                ack = self._orderer.request(wire.SUBMIT_TX, body, expect=wire.SUBMIT_ACK,
                                            error_class=AdmissionRejected)
                break
            except Unreachable:
                attempt += 1
                if attempt > self.submit_retries:
                    raise
                time.sleep(0.05 * 2 ** attempt)
        return PendingTx(tx.tx_id, tx.key, Version(int(ack["block"]), int(ack["tx_index"])))

    def submit(self, key, checksum, data_locator="", parents=(), custom=b"") -> PendingTx:
        record = self.build_record(key, checksum, data_locator, parents, custom)
        return self.submit_tx(make_transaction(self.identity, record))

    def wait_committed(self, pending: PendingTx, timeout: float | None = None,
                       peer: int = 0) -> Version:
        """Poll the peer until ``pending`` shows up in its key history."""
        deadline = time.monotonic() + (self.commit_timeout if timeout is None else timeout)
        want = pending.tx_id.hex()
        while True:
            try:
                body = self.query({"op": "history", "key": pending.key}, peer)
                for v in reversed(body["history"]["versions"]):
                    if v["tx_id"] == want:
                        return Version(int(v["block"]), int(v["tx_index"]))
            except NotFound:
                pass
            if time.monotonic() >= deadline:
                raise CommitTimeout(f"tx {want[:16]} not committed on peer within timeout")
            time.sleep(self.poll_interval)

    def post(self, key, checksum, data_locator="", parents=(), custom=b"") -> PostResult:
        pending = self.submit(key, checksum, data_locator, parents, custom)
        return PostResult(key, self.wait_committed(pending), pending.tx_id)

    def store_data(self, key, content: bytes, parents=(), custom=b"") -> StoreResult:
        """Put the blob first, then post its checksum and locator."""
        if self.backend is None:
            raise BadConfig("session has no off-chain backend configured")
        ref = self.backend.put(content)
        try:
            res = self.post(key, hashlib.sha256(content).digest(), ref.locator, parents, custom)
        except ProvLedgerError as exc:
            raise OrphanBlob(ref, exc) from exc
        return StoreResult(key, ref, res.version, res.tx_id)

    # -- reads -----------------------------------------------------------

    def get(self, key: str, peer: int = 0) -> GetResult:
        body = self.query({"op": "get", "key": key}, peer)
        return GetResult(ProvenanceRecord.from_json(body["record"]),
                         Version(int(body["block"]), int(body["tx_index"])), int(body["height"]))

    def get_data(self, key: str, peer: int = 0) -> tuple[bytes, ProvenanceRecord]:
        record = self.get(key, peer).record
        if not record.data_locator:
            raise NoDataLocator(f"record {key!r} has no data locator")
        if self.backend is None:
            raise BadConfig("session has no off-chain backend configured")
        content = self.backend.get(BlobRef.parse(record.data_locator))
        if not verify_item(record, content):
            raise IntegrityViolation(f"content of {key!r} does not match the on-chain checksum")
        return content, record

    def get_history(self, key: str, peer: int = 0) -> KeyHistory:
        return KeyHistory.from_json(self.query({"op": "history", "key": key}, peer)["history"])

    def get_lineage(self, key: str, max_depth: int | None = None,
                    version: Version | None = None, peer: int = 0) -> LineageGraph:
        q = {"op": "lineage", "key": key, "max_depth": max_depth}
        if version is not None:
            q.update(block=version.block, tx_index=version.tx_index)
        return LineageGraph.from_json(self.query(q, peer)["lineage"])


def init(config_path) -> ClientSession:
    """Open a session from a client config file and check the peer answers."""
    if not Path(config_path).exists():
        raise BadConfig(f"no such config file: {config_path}")
    return ClientSession.from_config(load_config(config_path))
