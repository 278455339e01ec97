"""Ed25519 identities and the static membership list.

A network is permissioned by a membership file: one member per line,
``<id> <role> <org> <public key hex>``. Secret keys live in separate files
holding the 32-byte seed as hex.
"""

from __future__ import annotations

import enum
import os
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import serialization
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)

from .errors import BadConfig, InvalidArgument

PUBLIC_KEY_SIZE = 32
SIGNATURE_SIZE = 64
SEED_SIZE = 32


class Role(str, enum.Enum):
    CLIENT = "client"
    PEER = "peer"
    ORDERER = "orderer"


@dataclass(frozen=True)
class Certificate:
    id: str
    public_key: bytes
    role: Role
    org: str

    def __post_init__(self):
        if len(self.public_key) != PUBLIC_KEY_SIZE:
            raise InvalidArgument(f"public key must be {PUBLIC_KEY_SIZE} bytes")
        object.__setattr__(self, "role", Role(self.role))

    @cached_property
    def _verifier(self) -> Ed25519PublicKey:
        return Ed25519PublicKey.from_public_bytes(self.public_key)


@dataclass(frozen=True)
class KeyPair:
    certificate: Certificate
    secret_key: bytes = field(repr=False)

    def __post_init__(self):
        if len(self.secret_key) != SEED_SIZE:
            raise InvalidArgument(f"secret key must be {SEED_SIZE} bytes")
        if _public_bytes(self._signer) != self.certificate.public_key:
            raise InvalidArgument("secret key does not match certificate")

    @cached_property
    def _signer(self) -> Ed25519PrivateKey:
        return Ed25519PrivateKey.from_private_bytes(self.secret_key)

    @property
    def id(self) -> str:
        return self.certificate.id


def _public_bytes(sk: Ed25519PrivateKey) -> bytes:
    return sk.public_key().public_bytes(
        encoding=serialization.Encoding.Raw, format=serialization.PublicFormat.Raw
    )


def generate_identity(id: str, role: Role | str, org: str, seed: bytes | None = None) -> KeyPair:
    """Create a keypair; a fixed ``seed`` gives byte-identical keys."""
    if not id:
        raise InvalidArgument("identity id must be non-empty")
    if any(c.isspace() for c in id):
        raise InvalidArgument("identity id must not contain whitespace")
    if seed is None:
        seed = os.urandom(SEED_SIZE)
    if len(seed) != SEED_SIZE:
        raise InvalidArgument(f"seed must be {SEED_SIZE} bytes")
    sk = Ed25519PrivateKey.from_private_bytes(seed)
    cert = Certificate(id=id, public_key=_public_bytes(sk), role=Role(role), org=org)
    return KeyPair(certificate=cert, secret_key=bytes(seed))


def sign(key: KeyPair, message: bytes) -> bytes:
    return key._signer.sign(bytes(message))


def verify(cert: Certificate, message: bytes, sig: bytes) -> bool:
    """True iff ``sig`` is a valid signature; malformed input gives False."""
    if not isinstance(sig, (bytes, bytearray)) or len(sig) != SIGNATURE_SIZE:
        return False
    try:
        cert._verifier.verify(bytes(sig), bytes(message))
    except (InvalidSignature, ValueError, TypeError):
        return False
    return True


@dataclass(frozen=True)
class MembershipList:
    members: frozenset[Certificate]
    orderer_id: str

    def __post_init__(self):
        ids = [m.id for m in self.members]
        if len(ids) != len(set(ids)):
            raise InvalidArgument("duplicate member id")
        orderers = [m for m in self.members if m.role is Role.ORDERER]
        if len(orderers) != 1:
            raise InvalidArgument("membership needs exactly one orderer")
        if orderers[0].id != self.orderer_id:
            raise InvalidArgument("orderer_id does not name the orderer")
        if not any(m.role is Role.PEER for m in self.members):
            raise InvalidArgument("membership needs at least one peer")

    @classmethod
    def of(cls, certs) -> MembershipList:
        certs = frozenset(certs)
        orderers = [c.id for c in certs if c.role is Role.ORDERER]
        return cls(members=certs, orderer_id=orderers[0] if len(orderers) == 1 else "")

    @cached_property
    def _by_id(self) -> dict[str, Certificate]:
        return {m.id: m for m in self.members}

    def get(self, cert_id: str) -> Certificate | None:
        return self._by_id.get(cert_id)

    @property
    def orderer(self) -> Certificate:
        return self._by_id[self.orderer_id]

    def with_role(self, role: Role) -> list[Certificate]:
        return sorted((m for m in self.members if m.role is role), key=lambda m: m.id)


def check_membership(members: MembershipList, cert_id: str, required_role: Role | str) -> bool:
    cert = members.get(cert_id)
    return cert is not None and cert.role is Role(required_role)


def dump_membership(members: MembershipList) -> str:
    lines = ["# id role org public_key"]
    for m in sorted(members.members, key=lambda m: m.id):
        lines.append(f"{m.id} {m.role.value} {m.org} {m.public_key.hex()}")
    return "\n".join(lines) + "\n"


def parse_membership(text: str) -> MembershipList:
    certs = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 4:
            raise BadConfig(f"membership line {lineno}: expected 4 fields")
        cid, role, org, pk = parts
        try:
            certs.append(Certificate(cid, bytes.fromhex(pk), Role(role), org))
        except (ValueError, InvalidArgument) as exc:
            raise BadConfig(f"membership line {lineno}: {exc}") from exc
    try:
        return MembershipList.of(certs)
    except InvalidArgument as exc:
        raise BadConfig(str(exc)) from exc


def load_membership(path) -> MembershipList:
    try:
        return parse_membership(Path(path).read_text())
    except OSError as exc:
        raise BadConfig(f"cannot read membership file: {exc}") from exc


def save_membership(members: MembershipList, path) -> None:
    Path(path).write_text(dump_membership(members))


def save_secret(key: KeyPair, path) -> None:
    p = Path(path)
    p.write_text(key.secret_key.hex() + "\n")
    p.chmod(0o600)


def load_keypair(path, cert_id: str, members: MembershipList | None = None,
                 role: Role | str = Role.CLIENT, org: str = "") -> KeyPair:
    """Load a seed file. The certificate comes from ``members`` when given."""
    try:
        seed = bytes.fromhex(Path(path).read_text().strip())
    except (OSError, ValueError) as exc:
        raise BadConfig(f"cannot read key file {path}: {exc}") from exc
    if members is not None and members.get(cert_id) is not None:
        cert = members.get(cert_id)
        role, org = cert.role, cert.org
    try:
        key = generate_identity(cert_id, role, org, seed=seed)
    except InvalidArgument as exc:
        raise BadConfig(str(exc)) from exc
    if members is not None and members.get(cert_id) is not None:
        if members.get(cert_id).public_key != key.certificate.public_key:
            raise BadConfig(f"key file {path} does not match membership entry {cert_id}")
    return key
