import hashlib
import os
import random

import pytest

from provledger.client import ClientSession, PendingTx, init
from provledger.config import write_config
from provledger.errors import (
    AdmissionRejected,
    BadConfig,
    CommitTimeout,
    IdentityNotMember,
    IntegrityViolation,
    NoDataLocator,
    NotFound,
    OrphanBlob,
    PeerUnreachable,
)
from provledger.identity import Role, generate_identity
from provledger.offchain import BlobRef
from provledger.provenance import ParentRef, Version
from provledger.topology import free_port


def sha(b: bytes) -> bytes:
    return hashlib.sha256(b).digest()


@pytest.fixture
def session(network):
    return network.session(0)


def test_init_missing_config(tmp_path):
    with pytest.raises(BadConfig):
        init(tmp_path / "absent.conf")


def test_init_unreachable_peer(tmp_path, network):
    conf = tmp_path / "c.conf"
    write_config(conf, {
        "id": "client0", "key": str(network.root / "conf" / "client0.key"),
        "membership": str(network.membership_path), "orderer": network.orderer_address,
        "peers": f"127.0.0.1:{free_port()}", "connect_timeout_s": 1,
    })
    with pytest.raises(PeerUnreachable):
        init(conf)


def test_init_ok(network):
    with init(network.config_path("client1")) as s:
        assert s.height() >= 1


def test_outsider_rejected_at_submit(network):
    outsider = generate_identity("mallory", Role.CLIENT, "org1")
    with ClientSession(outsider, network.orderer_address, network.peer_addresses) as s:
        with pytest.raises(IdentityNotMember) as exc:
            s.submit("k", sha(b""))
        assert exc.value.code == "unknown-client"


def test_metadata_only_round_trip(session):
    custom = b"\x00\x01 calibration=3"
    res = session.post("meta/1", sha(b"abc"), custom=custom)
    got = session.get("meta/1")
    assert got.version == res.version and got.height > res.version.block
    r = got.record
    assert (r.key, r.checksum, r.data_locator, r.creator_id, r.custom) == \
        ("meta/1", sha(b"abc"), "", "client0", custom)
    with pytest.raises(NoDataLocator):
        session.get_data("meta/1")
    with pytest.raises(NotFound):
        session.get("meta/never-posted")


def test_unknown_parent_rejected(session):
    with pytest.raises(AdmissionRejected) as exc:
        session.post("orphan", sha(b""), parents=[ParentRef("ghost", Version(999, 0))])
    assert exc.value.code == "unknown-parent"


def test_sequential_posts_get_increasing_versions(session):
    versions = [session.post("seq", sha(str(i).encode())).version for i in range(100)]
    assert versions == sorted(versions) and len(set(versions)) == 100
    hist = session.get_history("seq")
    assert [v.version for v in hist.versions] == versions
    assert session.get("seq").version == versions[-1]


def test_identical_posts_are_distinct(session):
    a = session.post("twice", sha(b"same"))
    b = session.post("twice", sha(b"same"))
    assert a.tx_id != b.tx_id and a.version < b.version


def test_store_and_fetch(network, session):
    content = os.urandom(100_000)
    s1 = session.store_data("blob/a", content)
    s2 = session.store_data("blob/b", content, parents=[s1.ref])
    assert s1.blob.locator == s2.blob.locator
    assert session.get("blob/b").record.data_locator == s1.blob.locator
    data, record = session.get_data("blob/b")
    assert data == content and record.checksum == sha(content)
    assert session.get_lineage("blob/b").node_refs() == {s1.ref, s2.ref}


def test_tampered_blob_detected(network, session):
    content = b"original measurement " * 100
    res = session.store_data("tamper/x", content)
    path = network.blob_server.backend.object_path(res.blob.digest)
    path.write_bytes(b"forged measurement " * 100)
    with pytest.raises(IntegrityViolation):
        session.get_data("tamper/x")


def test_orphan_blob_on_rejected_post(network, session):
    content = os.urandom(64)
    with pytest.raises(OrphanBlob) as exc:
        session.store_data("orphan/blob", content, custom=b"x" * 5000)
    assert isinstance(exc.value.cause, AdmissionRejected)
    assert network.blob_backend().get(exc.value.ref) == content


def test_commit_timeout(session):
    ghost = PendingTx(b"\x00" * 32, "seq", Version(0, 0))
    with pytest.raises(CommitTimeout):
        session.wait_committed(ghost, timeout=0.2)


def test_lineage_depth(session):
    a = session.post("L/a", sha(b"a"))
    b = session.post("L/b", sha(b"b"), parents=[a.ref])
    c = session.post("L/c", sha(b"c"), parents=[b.ref])
    assert session.get_lineage("L/c").edge_set() == {(c.ref, b.ref), (b.ref, a.ref)}
    assert session.get_lineage("L/c", max_depth=1).node_refs() == {c.ref, b.ref}
    assert session.get_lineage("L/b", version=b.version).node_refs() == {a.ref, b.ref}


def closure_via_history(session, ref):
    """Independent oracle: walk parents by fetching each node's stored record."""
    nodes, edges, stack = set(), set(), [ref]
    while stack:
        n = stack.pop()
        if n in nodes:
            continue
        nodes.add(n)
        rec = next(v.record for v in session.get_history(n.key).versions if v.version == n.version)
        for p in rec.parents:
            edges.add((n, p))
            stack.append(p)
    return nodes, edges


def test_random_dag_end_to_end(network, session):
    rng = random.Random(7)
    refs = []
    for i in range(30):
        parents = rng.sample(refs, min(len(refs), rng.randint(0, 3)))
        refs.append(session.post(f"dag/{i}", sha(bytes([i])), parents=parents).ref)
    assert network.wait_converged(timeout=10)
    for i, ref in enumerate(refs):
        g = session.get_lineage(ref.key, peer=i % network.n_peers)
        assert (g.node_refs(), g.edge_set()) == closure_via_history(session, ref)


def test_peers_converge(network, session):
    for i in range(20):
        session.submit(f"conv/{i}", sha(bytes([i])))
    assert network.wait_converged(timeout=10)
    digests = {session.state_digest(p) for p in range(network.n_peers)}
    assert len(digests) == 1


def test_blob_locator_parses(session):
    res = session.store_data("loc", b"x")
    assert BlobRef.parse(res.blob.locator).backend_id == "blobs"


def test_get_from_two_peers_after_quiescence(network, session):
    session.post("two-peers", sha(b"x"), custom=b"meta")
    assert network.wait_converged(timeout=10)
    assert session.get("two-peers", peer=0).record == session.get("two-peers", peer=3).record


def test_resubmitted_tx_commits_once(session):
    from provledger.ledger import make_transaction

    tx = make_transaction(session.identity, session.build_record("once", sha(b"1")))
    first = session.submit_tx(tx)
    again = session.submit_tx(tx)  # e.g. a retry after a lost ack
    assert again.projected == first.projected
    session.wait_committed(first)
    assert [v.tx_id for v in session.get_history("once").versions] == [tx.tx_id]
