"""Peer node: a full ledger replica that applies delivered blocks, catches up
from the orderer, and answers provenance queries locally."""

from __future__ import annotations

import base64
import logging
import threading
import time
from dataclasses import dataclass

from . import wire
from .errors import BlockRejected, InvalidArgument, MalformedQuery, Unreachable
from .identity import KeyPair, MembershipList, Role
from .ledger import Block, LedgerStore
from .provenance import (
    DEFAULT_CUSTOM_LIMIT,
    DEFAULT_MAX_LINEAGE_NODES,
    Version,
    exec_get,
    exec_get_history,
    exec_get_lineage,
)

log = logging.getLogger(__name__)


@dataclass
class PeerConfig:
    data_dir: str
    orderer: str
    listen: str = "127.0.0.1:7051"
    membership: str | None = None
    key: str | None = None
    id: str | None = None
    custom_limit: int = DEFAULT_CUSTOM_LIMIT
    sync_interval_s: float = 1.0

    @classmethod
    def from_config(cls, cfg) -> PeerConfig:
        return cls(
            data_dir=str(cfg.path("data_dir")),
            orderer=cfg.require("orderer"),
            listen=cfg.get("listen", "127.0.0.1:7051"),
            membership=str(cfg.path("membership")),
            key=str(cfg.path("key")),
            id=cfg.require("id"),
            custom_limit=cfg.int("custom_limit", DEFAULT_CUSTOM_LIMIT),
            sync_interval_s=cfg.float("sync_interval_s", 1.0),
        )


class Peer:
    def __init__(self, key: KeyPair, members: MembershipList, config: PeerConfig):
        cert = members.get(key.id)
        if cert is None or cert.role is not Role.PEER or cert.public_key != key.certificate.public_key:
            raise ValueError(f"{key.id!r} is not a peer in membership")
        self.key = key
        self.members = members
        self.config = config
        self.store = LedgerStore(config.data_dir, members, config.custom_limit)
        self.orderer = wire.Connection(config.orderer, timeout=10.0)
        self._apply_lock = threading.Lock()
        self._stop = threading.Event()
        self.server = wire.FramedServer(wire.parse_address(config.listen), {
            wire.BLOCK_DELIVER: self._on_block,
            wire.QUERY: self._on_query,
            wire.SYNC_REQUEST: self._on_sync,
        })
        self._syncer = threading.Thread(target=self._sync_loop, name=f"sync-{key.id}", daemon=True)
        self.refused: list[tuple[int, str]] = []

    @property
    def id(self) -> str:
        return self.key.id

    @property
    def address(self) -> str:
        return self.server.address

    @property
    def height(self) -> int:
        return self.store.height

    # -- block application -----------------------------------------------

    def handle_block_delivery(self, block: Block) -> int:
        """Apply a pushed block; returns the resulting height.

        Old blocks are acknowledged idempotently; a block beyond our height
        first pulls the gap from the orderer.
        """
        with self._apply_lock:
            h = self.store.height
            if block.number < h:
                return h
            if block.number > h:
                self._sync_locked(h, block.number - 1)
            if block.number == self.store.height:
                try:
                    self.store.append_block(block)
                except BlockRejected as exc:
                    log.error("peer %s refused block %d: %s", self.id, block.number, exc)
                    self.refused.append((block.number, exc.code))
                    raise
            return self.store.height

    def sync_from(self, start: int, end: int) -> int:
        """Pull and apply blocks ``start..end`` from the orderer. Returns how many were applied."""
        if start > end:
            raise InvalidArgument("sync range is empty")
        with self._apply_lock:
            return self._sync_locked(start, end)

    def _sync_locked(self, start: int, end: int, retries: int = 5) -> int:
        applied = 0
        backoff = 0.05
        n = max(start, self.store.height)
        while n <= end:
            try:
                body = self.orderer.request(wire.SYNC_REQUEST, {"from": n, "to": end},
                                            expect=wire.SYNC_BLOCKS)
            except Unreachable:
                if retries <= 0:
                    raise
                retries -= 1
                time.sleep(backoff)
                backoff = min(backoff * 2, 2.0)
                continue
            blocks = body["blocks"]
            if not blocks:
                break
            for raw in blocks:
                block = Block.from_bytes(base64.b64decode(raw))
                if block.number < self.store.height:
                    continue
                self.store.append_block(block)
                applied += 1
            n = self.store.height
        return applied

    def catch_up(self) -> int:
        """Sync to the orderer's current height."""
        body = self.orderer.request(wire.QUERY, {"op": "height"}, expect=wire.QUERY_RESULT)
        target = int(body["height"])
        if target <= self.store.height:
            return 0
        return self.sync_from(self.store.height, target - 1)

    def _sync_loop(self):
        while not self._stop.is_set():
            try:
                self.catch_up()
            except Unreachable:
                pass
            except BlockRejected as exc:
                log.error("peer %s: sync validation failure: %s", self.id, exc)
            except Exception:
                log.exception("peer %s: sync failed", self.id)
            self._stop.wait(self.config.sync_interval_s)

    # -- queries ---------------------------------------------------------

    def handle_query(self, q: dict) -> dict:
        """Answer one query from a consistent committed snapshot.

        Every result carries ``height`` so callers can detect staleness.
        """
        if not isinstance(q, dict) or not isinstance(q.get("op"), str):
            raise MalformedQuery("query needs an 'op'")
        op = q["op"]
        with self.store.reading():
            st = self.store
            out = {"height": st.height}
            try:
                if op == "height":
                    pass
                elif op == "get":
                    record, version = exec_get(st.state, _key(q))
                    out.update(record=record.to_json(), block=version.block,
                               tx_index=version.tx_index)
                elif op == "history":
                    out["history"] = exec_get_history(st.history, _key(q)).to_json()
                elif op == "lineage":
                    version = None
                    if q.get("block") is not None:
                        version = Version(int(q["block"]), int(q["tx_index"]))
                    depth = q.get("max_depth")
                    graph = exec_get_lineage(
                        st.state, st.history, _key(q), version,
                        None if depth is None else int(depth),
                        int(q.get("max_nodes", DEFAULT_MAX_LINEAGE_NODES)))
                    out["lineage"] = graph.to_json()
                elif op == "block":
                    n = int(q["number"])
                    out["block"] = base64.b64encode(st.block_bytes(n)).decode("ascii")
                elif op == "state_digest":
                    out["digest"] = st.state_digest().hex()
                elif op == "stats":
                    out.update(keys=len(st.state), history_entries=st.history.total_entries())
                else:
                    raise MalformedQuery(f"unknown query op {op!r}")
            except (KeyError, ValueError, TypeError) as exc:
                raise MalformedQuery(f"bad {op} query: {exc}") from exc
        return out

    # -- wire ------------------------------------------------------------

    def _on_block(self, body):
        block = Block.from_bytes(base64.b64decode(body["block"], validate=True))
        return wire.BLOCK_ACK, {"height": self.handle_block_delivery(block)}

    def _on_query(self, body):
        return wire.QUERY_RESULT, self.handle_query(body)

    def _on_sync(self, body):
        start = int(body["from"])
        end = min(int(body.get("to", self.store.height - 1)), self.store.height - 1, start + 63)
        blocks = [base64.b64encode(self.store.block_bytes(n)).decode("ascii")
                  for n in range(start, end + 1)]
        return wire.SYNC_BLOCKS, {"from": start, "blocks": blocks, "height": self.store.height}

    # -- lifecycle -------------------------------------------------------

    def start(self) -> Peer:
        self.server.start()
        self._syncer.start()
        return self

    def stop(self) -> None:
        """Stop serving; an in-flight block application completes first."""
        self._stop.set()
        self.server.stop()
        with self._apply_lock:
            pass
        if self._syncer.is_alive():
            self._syncer.join(timeout=5)
        self.orderer.close()


def _key(q: dict) -> str:
    key = q["key"]
    if not isinstance(key, str):
        raise TypeError("key must be a string")
    return key


def build_peer(config: PeerConfig) -> Peer:
    from .identity import load_keypair, load_membership

    members = load_membership(config.membership)
    key = load_keypair(config.key, config.id, members, Role.PEER)
    return Peer(key, members, config)
