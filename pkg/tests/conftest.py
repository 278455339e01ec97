import hashlib
import logging

import pytest

from provledger.identity import MembershipList, Role, generate_identity
from provledger.ledger import LedgerStore, block_hash, make_block, make_genesis, make_transaction
from provledger.provenance import ProvenanceRecord
from provledger.topology import LocalNetwork

logging.getLogger("provledger").setLevel(logging.CRITICAL)


def seed(name: str) -> bytes:
    return hashlib.sha256(name.encode()).digest()


@pytest.fixture(scope="session")
def keys():
    return {
        "orderer": generate_identity("orderer", Role.ORDERER, "ordererorg", seed("orderer")),
        "peer1": generate_identity("peer1", Role.PEER, "org1", seed("peer1")),
        "peer2": generate_identity("peer2", Role.PEER, "org2", seed("peer2")),
        "client1": generate_identity("client1", Role.CLIENT, "org1", seed("client1")),
        "client2": generate_identity("client2", Role.CLIENT, "org2", seed("client2")),
    }


@pytest.fixture(scope="session")
def members(keys):
    return MembershipList.of(k.certificate for k in keys.values())


def record(key, content=b"", parents=(), custom=b"", creator="client1", locator=""):
    return ProvenanceRecord(
        key=key,
        checksum=hashlib.sha256(content).digest(),
        data_locator=locator,
        creator_id=creator,
        parents=tuple(parents),
        custom=custom,
        timestamp=1_700_000_000_000,
    )


def extend_chain(store, orderer_key, client_key, n_blocks, txs_per_block=3, prefix="k"):
    """Append ``n_blocks`` blocks of metadata-only posts to ``store``."""
    if store.height == 0:
        store.append_block(make_genesis(orderer_key))
    for _ in range(n_blocks):
        n = store.height
        txs = [
            make_transaction(client_key, record(f"{prefix}{n}-{i}", f"{n}/{i}".encode()))
            for i in range(txs_per_block)
        ]
        store.append_block(
            make_block(orderer_key, n, block_hash(store.last_header), txs, 1_700_000_000_000 + n)
        )
    return store


@pytest.fixture
def chain(tmp_path, keys, members):
    store = LedgerStore(tmp_path / "ledger", members)
    return extend_chain(store, keys["orderer"], keys["client1"], 10)


@pytest.fixture(scope="module")
def network(tmp_path_factory):
    net = LocalNetwork(tmp_path_factory.mktemp("net"), n_peers=4, n_clients=4,
                       batch_max_count=50, batch_timeout_ms=20, sync_interval_s=0.2)
    with net:
        yield net


# acceptance results, one line per criterion, printed after the run
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
