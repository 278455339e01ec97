"""Permissioned provenance ledger with content-addressed off-chain storage."""

from .client import ClientSession, init
from .errors import ProvLedgerError
from .identity import Certificate, KeyPair, MembershipList, Role, generate_identity, sign, verify
from .ledger import Block, BlockHeader, LedgerStore, Transaction, block_hash, state_digest, verify_chain
from .offchain import BlobRef, LocalBackend, RemoteBackend
from .provenance import ParentRef, ProvenanceRecord, Version, verify_item

__version__ = "0.1.0"

__all__ = [
    "BlobRef", "Block", "BlockHeader", "Certificate", "ClientSession", "KeyPair", "LedgerStore",
    "LocalBackend", "MembershipList", "ParentRef", "ProvLedgerError", "ProvenanceRecord",
    "RemoteBackend", "Role", "Transaction", "Version", "block_hash", "generate_identity", "init",
    "sign", "state_digest", "verify", "verify_chain", "verify_item",
]
