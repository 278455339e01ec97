"""The single ordering service.

Admission, block cutting and the pending pool are serialized by one lock
(the sequencer). Admitted transactions are validated against committed state
plus everything already pending, which is why a child may name a parent that
has not been cut into a block yet: its version is fully determined by its
pool position.
"""

from __future__ import annotations

import base64
import logging
import threading
import time
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

from . import wire
from .errors import AdmissionRejected, BlockRejected, ProvLedgerError, RecordRejected, Unreachable
from .identity import KeyPair, MembershipList, Role
from .ledger import Block, LedgerStore, Transaction, check_transaction, make_block, make_genesis, \
    block_hash
from .provenance import DEFAULT_CUSTOM_LIMIT, Version, decode_and_validate

log = logging.getLogger(__name__)

DEFAULT_BATCH_MAX_COUNT = 100
DEFAULT_BATCH_TIMEOUT_MS = 500
SYNC_CHUNK = 64


@dataclass
class OrdererConfig:
    data_dir: str
    listen: str = "127.0.0.1:7050"
    batch_max_count: int = DEFAULT_BATCH_MAX_COUNT
    batch_timeout_ms: int = DEFAULT_BATCH_TIMEOUT_MS
    membership: str | None = None
    key: str | None = None
    id: str | None = None
    peers: dict[str, str] = field(default_factory=dict)
    custom_limit: int = DEFAULT_CUSTOM_LIMIT

    def __post_init__(self):
        if self.batch_max_count < 1:
            raise ValueError("batch_max_count must be >= 1")
        if self.batch_timeout_ms <= 0:
            raise ValueError("batch_timeout_ms must be > 0")

    @classmethod
    def from_config(cls, cfg) -> OrdererConfig:
        peers = {}
        for item in cfg.list("peers"):
            pid, _, addr = item.partition("@")
            peers[pid] = addr
        return cls(
            data_dir=str(cfg.path("data_dir")),
            listen=cfg.get("listen", "127.0.0.1:7050"),
            batch_max_count=cfg.int("batch_max_count", DEFAULT_BATCH_MAX_COUNT),
            batch_timeout_ms=cfg.int("batch_timeout_ms", DEFAULT_BATCH_TIMEOUT_MS),
            membership=str(cfg.path("membership")),
            key=str(cfg.path("key")),
            id=cfg.get("id"),
            peers=peers,
            custom_limit=cfg.int("custom_limit", DEFAULT_CUSTOM_LIMIT),
        )


class PendingPool:
    """FIFO of admitted transactions awaiting a block cut."""

    def __init__(self):
        self.txs: deque[Transaction] = deque()
        self.versions: set[tuple[str, Version]] = set()
        self.first_admitted: float | None = None

    def __len__(self):
        return len(self.txs)

    def add(self, tx: Transaction, version: Version) -> None:
        if not self.txs:
            self.first_admitted = time.monotonic()
        self.txs.append(tx)
        self.versions.add((tx.key, version))

    def drain(self) -> list[Transaction]:
        out = list(self.txs)
        self.txs.clear()
        self.versions.clear()
        self.first_admitted = None
        return out


class _ProjectedHistory:
    """Committed history plus the pending pool, as seen by validate_record."""

    def __init__(self, history, pool: PendingPool):
        self._history = history
        self._pool = pool

    def has_version(self, key, version) -> bool:
        return self._history.has_version(key, version) or (key, Version(*version)) in self._pool.versions


class _PeerLink:
    """Pushes new blocks to one peer, retrying with exponential backoff."""

    def __init__(self, orderer: Orderer, peer_id: str, address: str):
        self.orderer = orderer
        self.peer_id = peer_id
        self.conn = wire.Connection(address, timeout=10.0)
        self.acked_height = 0
        self.status = "pending"
        self._wake = threading.Event()
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._run, name=f"deliver-{peer_id}", daemon=True)

    def start(self):
        self._thread.start()

    def notify(self):
        self._wake.set()

    def stop(self):
        self._stop.set()
        self._wake.set()
        self._thread.join(timeout=5)
        self.conn.close()

    def _run(self):
        backoff = 0.05
        while not self._stop.is_set():
            height = self.orderer.store.height
            if self.acked_height >= height:
                self._wake.wait(1.0)
                self._wake.clear()
                continue
            status = self.orderer.deliver_to(self.peer_id, self.conn, height - 1)
            self.status = status.get("status", "error")
            if self.status == "ack":
                self.acked_height = max(self.acked_height, status["height"])
                backoff = 0.05
                if self.acked_height < height:
                    self._stop.wait(backoff)
            else:
                log.debug("delivery to %s failed: %s; retry in %.2fs", self.peer_id, status, backoff)
                self._stop.wait(backoff)
                backoff = min(backoff * 2, 2.0)


class Orderer:
    def __init__(self, key: KeyPair, members: MembershipList, config: OrdererConfig):
        if members.orderer_id != key.id or members.orderer.public_key != key.certificate.public_key:
            raise ValueError(f"{key.id!r} is not the orderer named in membership")
        self.key = key
        self.members = members
        self.config = config
        self.store = LedgerStore(config.data_dir, members, config.custom_limit)
        if self.store.height == 0:
            self.store.append_block(make_genesis(key))
        self.pool = PendingPool()
        self._tx_index: dict[bytes, Version] = {}
        for n in range(self.store.height):
            for i, tx in enumerate(self.store.get_block(n).transactions):
                self._tx_index[tx.tx_id] = Version(n, i)
        self._cond = threading.Condition()
        self._running = False
        self._links: dict[str, _PeerLink] = {}
        self.server = wire.FramedServer(wire.parse_address(config.listen), {
            wire.SUBMIT_TX: self._on_submit,
            wire.SYNC_REQUEST: self._on_sync,
            wire.QUERY: self._on_query,
        })
        self._timer = threading.Thread(target=self._timer_loop, name="orderer-timer", daemon=True)
        self.on_block = []  # callbacks(block), for instrumentation

    @property
    def address(self) -> str:
        return self.server.address

    # -- admission and cutting -------------------------------------------

    def admit(self, tx: Transaction) -> tuple[Version, bool]:
        """Validate and enqueue ``tx``. Returns (projected version, duplicate).

        Re-submitting an already admitted transaction is acknowledged with its
        original version and is not enqueued again.
        """
        with self._cond:
            known = self._tx_index.get(tx.tx_id)
            if known is not None:
                return known, True
            try:
                check_transaction(tx, self.members)
            except BlockRejected as exc:
                raise AdmissionRejected(str(exc), code=exc.code) from None
            try:
                decode_and_validate(_ProjectedHistory(self.store.history, self.pool), tx,
                                    self.config.custom_limit)
            except RecordRejected as exc:
                raise AdmissionRejected(str(exc), code=exc.code) from None
            version = Version(self.store.height, len(self.pool))
            self.pool.add(tx, version)
            self._tx_index[tx.tx_id] = version
            if len(self.pool) >= self.config.batch_max_count:
                self.cut_block("count-full")
            else:
                self._cond.notify_all()
            return version, False

    def cut_block(self, reason: str) -> Block | None:
        """Seal the pool into the next block. Never emits an empty block."""
        with self._cond:
            if not self.pool:
                return None
            txs = self.pool.drain()
            block = make_block(self.key, self.store.height, block_hash(self.store.last_header),
                               txs, int(time.time() * 1000))
            self.store.append_block(block)
            self._cond.notify_all()
        log.debug("cut block %d (%s, %d txs)", block.number, reason, len(txs))
        for link in list(self._links.values()):
            link.notify()
        for cb in self.on_block:
            cb(block)
        return block

    def _timer_loop(self):
        timeout = self.config.batch_timeout_ms / 1000.0
        with self._cond:
            while self._running:
                if self.pool.first_admitted is None:
                    self._cond.wait(1.0)
                    continue
                remaining = self.pool.first_admitted + timeout - time.monotonic()
                if remaining > 0:
                    self._cond.wait(remaining)
                    continue
                self.cut_block("timeout")

    # -- delivery --------------------------------------------------------

    def add_peer(self, peer_id: str, address: str) -> None:
        if peer_id in self._links:
            self._links[peer_id].stop()
        link = _PeerLink(self, peer_id, address)
        self._links[peer_id] = link
        if self._running:
            link.start()

    def deliver_to(self, peer_id: str, conn: wire.Connection, number: int) -> dict:
        try:
            body = conn.request(wire.BLOCK_DELIVER, {
                "block": base64.b64encode(self.store.block_bytes(number)).decode("ascii"),
            }, expect=wire.BLOCK_ACK)
        except Unreachable as exc:
            return {"peer": peer_id, "status": "unreachable", "detail": str(exc)}
        except ProvLedgerError as exc:
            return {"peer": peer_id, "status": exc.code, "detail": str(exc)}
        return {"peer": peer_id, "status": "ack", "height": int(body["height"])}

    def deliver(self, block: Block) -> dict[str, dict]:
        """One parallel delivery attempt of a committed ``block`` to every peer.

        Background links keep retrying unreachable peers; this call only
        reports what happened on this attempt.
        """
        if block.number >= self.store.height:
            raise ValueError("deliver requires the block to be committed locally first")

        def one(item):
            pid, link = item
            return pid, self.deliver_to(pid, wire.Connection(link.conn.address, timeout=10.0),
                                        block.number)

        with ThreadPoolExecutor(max_workers=max(1, len(self._links))) as pool:
            return dict(pool.map(one, list(self._links.items())))

    def delivery_status(self) -> dict[str, dict]:
        return {pid: {"status": l.status, "acked_height": l.acked_height}
                for pid, l in self._links.items()}

    # -- wire handlers ---------------------------------------------------

    def _on_submit(self, body):
        tx = Transaction.from_bytes(base64.b64decode(body["tx"], validate=True))
        version, dup = self.admit(tx)
        return wire.SUBMIT_ACK, {"tx_id": tx.tx_id.hex(), "block": version.block,
                                 "tx_index": version.tx_index, "duplicate": dup}

    def _on_sync(self, body):
        start = int(body["from"])
        height = self.store.height
        end = min(int(body.get("to", height - 1)), height - 1, start + SYNC_CHUNK - 1)
        blocks = [base64.b64encode(self.store.block_bytes(n)).decode("ascii")
                  for n in range(start, end + 1)] if start >= 0 else []
        return wire.SYNC_BLOCKS, {"from": start, "blocks": blocks, "height": height}

    def _on_query(self, body):
        op = body.get("op")
        with self.store.reading():
            height = self.store.height
            if op == "height":
                return wire.QUERY_RESULT, {"height": height}
            if op == "state_digest":
                return wire.QUERY_RESULT, {"height": height, "digest": self.store.state_digest().hex()}
            if op == "pending":
                return wire.QUERY_RESULT, {"height": height, "pending": len(self.pool)}
        return wire.ERROR, {"code": "malformed-query", "message": f"orderer does not answer {op!r}"}

    # -- lifecycle -------------------------------------------------------

    def start(self) -> Orderer:
        self._running = True
        self._timer.start()
        for link in self._links.values():
            link.start()
        self.server.start()
        return self

    def stop(self) -> None:
        with self._cond:
            self._running = False
            self._cond.notify_all()
        self.server.stop()
        for link in self._links.values():
            link.stop()
        if self._timer.is_alive():
            self._timer.join(timeout=5)


def build_orderer(config: OrdererConfig) -> Orderer:
    from .identity import load_keypair, load_membership

    members = load_membership(config.membership)
    key = load_keypair(config.key, config.id or members.orderer_id, members, Role.ORDERER)
    orderer = Orderer(key, members, config)
    for pid, addr in config.peers.items():
        orderer.add_peer(pid, addr)
    return orderer
