import base64
import dataclasses
import threading

import pytest

from provledger import wire
from provledger.errors import BlockRejected, MalformedQuery, NotFound, Unreachable
from provledger.ledger import Block, LedgerStore, block_hash, make_block, make_transaction
from provledger.peer import Peer, PeerConfig
from provledger.provenance import LineageGraph, ParentRef, Version

from conftest import extend_chain, record


class StubOrderer:
    """Serves sync requests from a LedgerStore, optionally going away after ``limit`` blocks."""

    def __init__(self, store, address=("127.0.0.1", 0), limit=None):
        self.store = store
        self.limit = limit
        self.served = 0
        self.server = wire.FramedServer(address, {
            wire.SYNC_REQUEST: self.sync,
            wire.QUERY: lambda body: (wire.QUERY_RESULT, {"height": self.store.height}),
        }).start()

    @property
    def address(self):
        return self.server.address

    def sync(self, body):
        start = int(body["from"])
        end = min(int(body["to"]), self.store.height - 1, start + 9)
        if self.limit is not None:
            end = min(end, self.limit - 1)
            if start >= self.limit:
                self.server.stop()  # drops this connection before any reply
        blocks = [base64.b64encode(self.store.block_bytes(n)).decode() for n in range(start, end + 1)]
        self.served += len(blocks)
        return wire.SYNC_BLOCKS, {"from": start, "blocks": blocks, "height": self.store.height}

    def stop(self):
        self.server.stop()


def make_peer(tmp_path, keys, members, orderer_addr, name="peer1"):
    cfg = PeerConfig(data_dir=str(tmp_path / name), orderer=orderer_addr, listen="127.0.0.1:0",
                     sync_interval_s=60)
    return Peer(keys[name], members, cfg)


@pytest.fixture
def stub(chain):
    s = StubOrderer(chain)
    yield s
    s.stop()


def test_peer_rejects_non_peer_identity(tmp_path, keys, members, stub):
    with pytest.raises(ValueError):
        make_peer(tmp_path, keys, members, stub.address, name="client1")


def test_in_order_delivery(tmp_path, keys, members, chain, stub):
    peer = make_peer(tmp_path, keys, members, stub.address)
    for n in range(chain.height):
        assert peer.handle_block_delivery(chain.get_block(n)) == n + 1
    assert peer.store.state_digest() == chain.state_digest()
    assert stub.served == 0


def test_old_block_ack_is_idempotent(tmp_path, keys, members, chain, stub):
    peer = make_peer(tmp_path, keys, members, stub.address)
    for n in range(4):
        peer.handle_block_delivery(chain.get_block(n))
    digest = peer.store.state_digest()
    assert peer.handle_block_delivery(chain.get_block(2)) == 4
    assert peer.store.state_digest() == digest


def test_gap_delivery_syncs_first(tmp_path, keys, members, chain, stub):
    peer = make_peer(tmp_path, keys, members, stub.address)
    for n in range(3):
        peer.handle_block_delivery(chain.get_block(n))
    assert peer.handle_block_delivery(chain.get_block(6)) == 7
    assert stub.served == 3
    assert [peer.store.header(n) for n in range(7)] == [chain.header(n) for n in range(7)]


def test_tampered_block_refused(tmp_path, keys, members, chain, stub):
    peer = make_peer(tmp_path, keys, members, stub.address)
    for n in range(5):
        peer.handle_block_delivery(chain.get_block(n))
    good = chain.get_block(5)
    tx = good.transactions[1]
    evil_tx = dataclasses.replace(tx, record_payload=tx.record_payload[:-1] + b"\xff")
    txs = list(good.transactions)
    txs[1] = evil_tx
    evil = Block(good.header, tuple(txs), good.orderer_signature)
    with pytest.raises(BlockRejected) as exc:
        peer.handle_block_delivery(evil)
    assert exc.value.code == "bad-data-hash"
    assert peer.height == 5 and peer.refused == [(5, "bad-data-hash")]
    # the genuine block still applies afterwards
    assert peer.handle_block_delivery(good) == 6


def test_block_signed_by_impostor_refused(tmp_path, keys, members, chain, stub):
    peer = make_peer(tmp_path, keys, members, stub.address)
    peer.sync_from(0, chain.height - 1)
    forged = make_block(keys["peer2"], chain.height, block_hash(chain.last_header),
                        [make_transaction(keys["client1"], record("z"))], 1)
    with pytest.raises(BlockRejected) as exc:
        peer.handle_block_delivery(forged)
    assert exc.value.code == "bad-signature"


def test_wipe_and_resync(tmp_path, keys, members):
    src = extend_chain(LedgerStore(tmp_path / "src", members), keys["orderer"], keys["client1"], 50, 2)
    stub = StubOrderer(src)
    try:
        peer = make_peer(tmp_path, keys, members, stub.address)
        assert peer.catch_up() == 51
        assert peer.store.state_digest() == src.state_digest()
        assert all(peer.store.header(n) == src.header(n) for n in range(51))
        # restart: nothing left to apply
        again = make_peer(tmp_path, keys, members, stub.address)
        assert again.height == 51
        assert again.catch_up() == 0
    finally:
        stub.stop()


def test_interrupted_sync_keeps_progress(tmp_path, keys, members):
    src = extend_chain(LedgerStore(tmp_path / "src", members), keys["orderer"], keys["client1"], 50, 1)
    flaky = StubOrderer(src, limit=20)
    peer = make_peer(tmp_path, keys, members, flaky.address)
    with pytest.raises(Unreachable):
        peer.sync_from(0, 50)
    assert peer.height == 20
    host, port = wire.parse_address(flaky.address)
    healthy = StubOrderer(src, address=(host, port))
    try:
        assert peer.sync_from(0, 50) == 31
        assert peer.store.state_digest() == src.state_digest()
    finally:
        healthy.stop()


def dag_store(tmp_path, keys, members):
    store = extend_chain(LedgerStore(tmp_path / "dag", members), keys["orderer"], keys["client1"], 0)
    c1 = keys["client1"]
    a = ParentRef("A", Version(1, 0))
    b = ParentRef("B", Version(1, 1))
    txs = [make_transaction(c1, record("A")), make_transaction(c1, record("B", parents=[a]))]
    store.append_block(make_block(keys["orderer"], 1, block_hash(store.last_header), txs, 1))
    txs = [make_transaction(c1, record("C", parents=[a, b])), make_transaction(c1, record("A", b"v2"))]
    store.append_block(make_block(keys["orderer"], 2, block_hash(store.last_header), txs, 2))
    return store


def test_queries(tmp_path, keys, members):
    src = dag_store(tmp_path, keys, members)
    stub = StubOrderer(src)
    try:
        peer = make_peer(tmp_path, keys, members, stub.address)
        peer.catch_up()
        q = peer.handle_query
        assert q({"op": "height"}) == {"height": 3}
        got = q({"op": "get", "key": "A"})
        assert (got["block"], got["tx_index"], got["height"]) == (2, 1, 3)
        assert len(q({"op": "history", "key": "A"})["history"]["versions"]) == 2
        g = LineageGraph.from_json(q({"op": "lineage", "key": "C"})["lineage"])
        a, b, c = ParentRef("A", Version(1, 0)), ParentRef("B", Version(1, 1)), ParentRef("C", Version(2, 0))
        assert g.node_refs() == {a, b, c}
        assert g.edge_set() == {(c, a), (c, b), (b, a)}
        g1 = LineageGraph.from_json(q({"op": "lineage", "key": "C", "max_depth": 1})["lineage"])
        assert g1.edge_set() == {(c, a), (c, b)}
        old = LineageGraph.from_json(q({"op": "lineage", "key": "A", "block": 1, "tx_index": 0})["lineage"])
        assert old.node_refs() == {a}
        assert q({"op": "state_digest"})["digest"] == src.state_digest().hex()
        assert q({"op": "stats"}) == {"height": 3, "keys": 3, "history_entries": 4}
        raw = base64.b64decode(q({"op": "block", "number": 2})["block"])
        assert raw == src.block_bytes(2)
        with pytest.raises(NotFound):
            q({"op": "get", "key": "nope"})
        for bad in ({"op": "frobnicate"}, {"key": "A"}, {"op": "get"}, {"op": "get", "key": 7}):
            with pytest.raises(MalformedQuery):
                q(bad)
    finally:
        stub.stop()


def test_queries_see_whole_blocks(tmp_path, keys, members):
    src = extend_chain(LedgerStore(tmp_path / "src", members), keys["orderer"], keys["client1"], 40, 5)
    stub = StubOrderer(src)
    peer = make_peer(tmp_path, keys, members, stub.address)
    peer.handle_block_delivery(src.get_block(0))
    done = threading.Event()

    def apply_all():
        for n in range(1, src.height):
            peer.handle_block_delivery(src.get_block(n))
        done.set()

    t = threading.Thread(target=apply_all)
    t.start()
    try:
        while not done.is_set():
            s = peer.handle_query({"op": "stats"})
            assert s["history_entries"] == 5 * (s["height"] - 1)
    finally:
        t.join()
        stub.stop()


def test_peer_over_the_wire(tmp_path, keys, members, chain, stub):
    peer = make_peer(tmp_path, keys, members, stub.address).start()
    try:
        conn = wire.Connection(peer.address)
        body = conn.request(wire.BLOCK_DELIVER, {"block": base64.b64encode(chain.block_bytes(0)).decode()},
                            expect=wire.BLOCK_ACK)
        assert body["height"] >= 1  # the background sync may already have run
        peer.catch_up()
        assert conn.request(wire.QUERY, {"op": "height"}, expect=wire.QUERY_RESULT) == {"height": chain.height}
        with pytest.raises(MalformedQuery):
            conn.request(wire.QUERY, {"op": "bogus"})
        conn.close()
    finally:
        peer.stop()
