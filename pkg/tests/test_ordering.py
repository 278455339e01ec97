import dataclasses
import threading
import time

import pytest

from provledger.errors import AdmissionRejected
from provledger.ledger import make_transaction
from provledger.ordering import Orderer, OrdererConfig
from provledger.peer import Peer, PeerConfig
from provledger.provenance import ParentRef, Version

from conftest import record


def make_orderer(tmp_path, keys, members, **kw):
    cfg = OrdererConfig(data_dir=str(tmp_path / "orderer"), listen="127.0.0.1:0", **kw)
    return Orderer(keys["orderer"], members, cfg)


@pytest.fixture
def orderer(tmp_path, keys, members):
    o = make_orderer(tmp_path, keys, members, batch_max_count=10, batch_timeout_ms=10_000).start()
    yield o
    o.stop()


def tx(keys, key, **kw):
    return make_transaction(keys["client1"], record(key, **kw))


def test_config_validation(tmp_path):
    with pytest.raises(ValueError):
        OrdererConfig(data_dir=str(tmp_path), batch_max_count=0)
    with pytest.raises(ValueError):
        OrdererConfig(data_dir=str(tmp_path), batch_timeout_ms=0)
    assert (OrdererConfig(data_dir="x").batch_max_count, OrdererConfig(data_dir="x").batch_timeout_ms) == (100, 500)


def test_genesis_created(orderer):
    assert orderer.store.height == 1
    assert orderer.store.get_block(0).header.timestamp == 0


def test_admit_valid(orderer, keys):
    version, dup = orderer.admit(tx(keys, "a"))
    assert version == Version(1, 0) and not dup
    assert len(orderer.pool) == 1


def test_admit_peer_signed_is_unknown_client(orderer, keys):
    t = make_transaction(keys["peer1"], record("a", creator="peer1"))
    with pytest.raises(AdmissionRejected) as exc:
        orderer.admit(t)
    assert exc.value.code == "unknown-client"


def test_admit_bad_signature(orderer, keys):
    t = dataclasses.replace(tx(keys, "a"), client_signature=bytes(64))
    with pytest.raises(AdmissionRejected) as exc:
        orderer.admit(t)
    assert exc.value.code == "bad-signature"


def test_admit_record_errors(orderer, keys):
    with pytest.raises(AdmissionRejected) as exc:
        orderer.admit(tx(keys, "a", parents=[ParentRef("ghost", Version(1, 0))]))
    assert exc.value.code == "unknown-parent"
    with pytest.raises(AdmissionRejected) as exc:
        orderer.admit(tx(keys, "a", custom=b"x" * 5000))
    assert exc.value.code == "oversize-custom"
    # creator must be the signing client
    with pytest.raises(AdmissionRejected):
        orderer.admit(make_transaction(keys["client1"], record("a", creator="client2")))
    assert len(orderer.pool) == 0


def test_pending_parent_admitted_same_block(tmp_path, keys, members):
    o = make_orderer(tmp_path, keys, members, batch_max_count=10, batch_timeout_ms=200).start()
    try:
        parent_version, _ = o.admit(tx(keys, "parent"))
        child_version, _ = o.admit(tx(keys, "child", parents=[ParentRef("parent", parent_version)]))
        deadline = time.monotonic() + 3
        while o.store.height < 2 and time.monotonic() < deadline:
            time.sleep(0.01)
        block = o.store.get_block(1)
        assert [t.key for t in block.transactions] == ["parent", "child"]
        assert o.store.state.get("child").version == child_version
        assert o.store.history.entries("child")[0].valid
    finally:
        o.stop()


def test_count_cut_before_timeout(orderer, keys):
    for i in range(10):
        orderer.admit(tx(keys, f"k{i}"))
    assert orderer.store.height == 2
    assert len(orderer.store.get_block(1).transactions) == 10
    assert len(orderer.pool) == 0


def test_timeout_cut(tmp_path, keys, members):
    o = make_orderer(tmp_path, keys, members, batch_max_count=10, batch_timeout_ms=100).start()
    try:
        t0 = time.monotonic()
        o.admit(tx(keys, "solo"))
        while o.store.height < 2:
            assert time.monotonic() - t0 < 3 * 0.1 + 0.5
            time.sleep(0.005)
        assert len(o.store.get_block(1).transactions) == 1
        time.sleep(0.35)
        assert o.store.height == 2  # no empty blocks
    finally:
        o.stop()


def test_no_block_without_admissions(tmp_path, keys, members):
    o = make_orderer(tmp_path, keys, members, batch_timeout_ms=50).start()
    try:
        time.sleep(0.3)
        assert o.store.height == 1
        assert o.cut_block("timeout") is None
    finally:
        o.stop()


def test_duplicate_submission_not_enqueued(orderer, keys):
    t = tx(keys, "once")
    v1, d1 = orderer.admit(t)
    v2, d2 = orderer.admit(t)
    assert v1 == v2 and (d1, d2) == (False, True)
    assert len(orderer.pool) == 1


def test_total_order_and_block_bound(tmp_path, keys, members):
    o = make_orderer(tmp_path, keys, members, batch_max_count=7, batch_timeout_ms=30).start()
    admitted = []
    lock = threading.Lock()

    def submit(worker):
        for i in range(40):
            t = make_transaction(keys["client1" if worker % 2 else "client2"],
                                 record(f"w{worker}-{i}", creator="client1" if worker % 2 else "client2"))
            with lock:  # record the order the sequencer saw
                o.admit(t)
                admitted.append(t.tx_id)

    try:
        threads = [threading.Thread(target=submit, args=(w,)) for w in range(4)]
        for th in threads:
            th.start()
        for th in threads:
            th.join()
        deadline = time.monotonic() + 3
        while o.store.history.total_entries() < len(admitted) and time.monotonic() < deadline:
            time.sleep(0.01)
        committed = []
        for n in range(1, o.store.height):
            txs = o.store.get_block(n).transactions
            assert 1 <= len(txs) <= 7
            committed.extend(t.tx_id for t in txs)
        assert committed == admitted
    finally:
        o.stop()


def test_deliver_to_peers(tmp_path, keys, members):
    o = make_orderer(tmp_path, keys, members, batch_max_count=1, batch_timeout_ms=1000).start()
    peers = []
    try:
        for pid in ("peer1", "peer2"):
            p = Peer(keys[pid], members, PeerConfig(
                data_dir=str(tmp_path / pid), orderer=o.address, listen="127.0.0.1:0",
                sync_interval_s=60)).start()
            peers.append(p)
            o.add_peer(pid, p.address)
        o.admit(tx(keys, "x"))
        block = o.store.get_block(1)
        status = o.deliver(block)
        assert {s["status"] for s in status.values()} == {"ack"}
        assert [p.height for p in peers] == [2, 2]
        assert {p.store.state_digest() for p in peers} == {o.store.state_digest()}
        # duplicate delivery: acked, height unchanged
        status = o.deliver(block)
        assert all(s == {"peer": pid, "status": "ack", "height": 2} for pid, s in status.items())
    finally:
        o.stop()
        for p in peers:
            p.stop()


def test_orderer_rejects_foreign_key(tmp_path, keys, members):
    with pytest.raises(ValueError):
        Orderer(keys["peer1"], members, OrdererConfig(data_dir=str(tmp_path)))
