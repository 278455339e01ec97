"""Content-addressed off-chain blob storage.

Blobs are named by their SHA-256 digest, so the checksum recorded on chain
and the storage key are the same value. Two backends share one contract:
a local directory and a TCP client for the standalone blob server.

Locators look like ``store://<backend-id>/<hex digest>``.
"""

from __future__ import annotations

import base64
import errno
import hashlib
import os
import uuid
from dataclasses import dataclass
from pathlib import Path

from . import wire
from .errors import (
    BackendUnavailable,
    DiskFull,
    IntegrityViolation,
    InvalidArgument,
    NotFound,
    Oversize,
)

DEFAULT_MAX_BLOB = 64 * 1024 * 1024
SCHEME = "store://"


@dataclass(frozen=True)
class BlobRef:
    digest: bytes
    backend_id: str
    size: int | None = None

    @property
    def hexdigest(self) -> str:
        return self.digest.hex()

    @property
    def locator(self) -> str:
        return f"{SCHEME}{self.backend_id}/{self.hexdigest}"

    def __eq__(self, other):
        # size is advisory: a ref parsed from a locator has none
        return isinstance(other, BlobRef) and (self.digest, self.backend_id) == (
            other.digest, other.backend_id)

    def __hash__(self):
        return hash((self.digest, self.backend_id))

    def to_json(self) -> dict:
        return {"locator": self.locator, "digest": self.hexdigest, "size": self.size}

    @classmethod
    def parse(cls, locator: str, size: int | None = None) -> BlobRef:
        if not locator.startswith(SCHEME):
            raise InvalidArgument(f"not a blob locator: {locator!r}")
        backend_id, _, hexdigest = locator[len(SCHEME):].rpartition("/")
        try:
            digest = bytes.fromhex(hexdigest)
        except ValueError:
            digest = b""
        if not backend_id or len(digest) != 32:
            raise InvalidArgument(f"malformed blob locator: {locator!r}")
        return cls(digest, backend_id, size)


class StoreBackend:
    """put/get/has over content-addressed blobs."""

    backend_id: str
    max_size: int = DEFAULT_MAX_BLOB

    def put(self, content: bytes) -> BlobRef:
        raise NotImplementedError

    def get(self, ref: BlobRef) -> bytes:
        raise NotImplementedError

    def has(self, ref: BlobRef) -> bool:
        raise NotImplementedError

    def close(self) -> None:
        pass

    def _check_ref(self, ref: BlobRef) -> None:
        if ref.backend_id != self.backend_id:
            raise BackendUnavailable(
                f"locator names backend {ref.backend_id!r}, this is {self.backend_id!r}")


class LocalBackend(StoreBackend):
    """Blobs under ``<root>/objects/<first two hex chars>/<hex digest>``."""

    def __init__(self, root, backend_id: str = "local", max_size: int = DEFAULT_MAX_BLOB):
        self.root = Path(root)
        self.backend_id = backend_id
        self.max_size = max_size
        (self.root / "objects").mkdir(parents=True, exist_ok=True)

    def object_path(self, digest: bytes) -> Path:
        h = digest.hex()
        return self.root / "objects" / h[:2] / h

    def put(self, content: bytes) -> BlobRef:
        if len(content) > self.max_size:
            raise Oversize(f"blob of {len(content)} bytes exceeds limit {self.max_size}")
        digest = hashlib.sha256(content).digest()
        ref = BlobRef(digest, self.backend_id, len(content))
        path = self.object_path(digest)
        if path.exists():
            return ref
        tmp = path.parent / f".{path.name}.{uuid.uuid4().hex}.tmp"
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            with open(tmp, "wb") as fh:
                fh.write(content)
            os.replace(tmp, path)
        except OSError as exc:
            tmp.unlink(missing_ok=True)
            if exc.errno == errno.ENOSPC:
                raise DiskFull(str(exc)) from exc
            raise BackendUnavailable(str(exc)) from exc
        return ref

    def get(self, ref: BlobRef) -> bytes:
        self._check_ref(ref)
        try:
            content = self.object_path(ref.digest).read_bytes()
        except FileNotFoundError:
            raise NotFound(f"no blob {ref.hexdigest}") from None
        except OSError as exc:
            raise BackendUnavailable(str(exc)) from exc
        if hashlib.sha256(content).digest() != ref.digest:
            raise IntegrityViolation(f"blob {ref.hexdigest} does not match its digest")
        return content

    def has(self, ref: BlobRef) -> bool:
        self._check_ref(ref)
        return self.object_path(ref.digest).exists()

    def object_count(self) -> int:
        return sum(1 for p in (self.root / "objects").glob("*/*") if not p.name.startswith("."))


class RemoteBackend(StoreBackend):
    """Client half of the blob server. Re-verifies every fetched blob locally."""

    def __init__(self, address: str, backend_id: str | None = None,
                 max_size: int = DEFAULT_MAX_BLOB, timeout: float = 30.0):
        self.address = address
        self.max_size = max_size
        self._conn = wire.Connection(address, timeout=timeout, unreachable=BackendUnavailable)
        self._backend_id = backend_id

    @property
    def backend_id(self) -> str:
        if self._backend_id is None:
            body = self._conn.request(wire.BLOB_HAS, {"digest": "00" * 32},
                                      expect=wire.BLOB_HAS_RESULT)
            self._backend_id = body["backend_id"]
        return self._backend_id

    def put(self, content: bytes) -> BlobRef:
        if len(content) > self.max_size:
            raise Oversize(f"blob of {len(content)} bytes exceeds limit {self.max_size}")
        body = self._conn.request(
            wire.BLOB_PUT, {"content": base64.b64encode(content).decode("ascii")},
            expect=wire.BLOB_PUT_RESULT)
        ref = BlobRef.parse(body["locator"], int(body["size"]))
        if ref.digest != hashlib.sha256(content).digest():
            raise IntegrityViolation("blob server returned a wrong digest")
        self._backend_id = ref.backend_id
        return ref

    def get(self, ref: BlobRef) -> bytes:
        self._check_ref(ref)
        body = self._conn.request(wire.BLOB_GET, {"digest": ref.hexdigest},
                                  expect=wire.BLOB_GET_RESULT)
        content = base64.b64decode(body["content"])
        if hashlib.sha256(content).digest() != ref.digest:
            raise IntegrityViolation(f"blob {ref.hexdigest} does not match its digest")
        return content

    def has(self, ref: BlobRef) -> bool:
        self._check_ref(ref)
        body = self._conn.request(wire.BLOB_HAS, {"digest": ref.hexdigest},
                                  expect=wire.BLOB_HAS_RESULT)
        return bool(body["present"])

    def close(self) -> None:
        self._conn.close()


def put_blob(backend: StoreBackend, content: bytes) -> BlobRef:
    return backend.put(content)


def get_blob(backend: StoreBackend, ref: BlobRef | str) -> bytes:
    if isinstance(ref, str):
        ref = BlobRef.parse(ref)
    return backend.get(ref)


def open_backend(spec: str, backend_id: str = "local", max_size: int = DEFAULT_MAX_BLOB,
                 timeout: float = 30.0) -> StoreBackend:
    """``tcp://host:port`` for a blob server, ``dir:/path`` (or a bare path) for local."""
    if spec.startswith("tcp://"):
        return RemoteBackend(spec[len("tcp://"):], max_size=max_size, timeout=timeout)
    if spec.startswith("dir:"):
        spec = spec[len("dir:"):]
    return LocalBackend(spec, backend_id, max_size)


class BlobServer:
    """Serves one LocalBackend over the framed-JSON protocol."""

    def __init__(self, data_dir, listen: str = "127.0.0.1:0", backend_id: str = "blobs",
                 max_size: int = DEFAULT_MAX_BLOB):
        self.backend = LocalBackend(data_dir, backend_id, max_size)
        self.server = wire.FramedServer(wire.parse_address(listen), {
            wire.BLOB_PUT: self._put,
            wire.BLOB_GET: self._get,
            wire.BLOB_HAS: self._has,
        })

    @property
    def address(self) -> str:
        return self.server.address

    def _ref(self, body: dict) -> BlobRef:
        try:
            return BlobRef(bytes.fromhex(body["digest"]), self.backend.backend_id)
        except (KeyError, ValueError):
            raise InvalidArgument("blob request needs a hex digest") from None

    def _put(self, body):
        content = base64.b64decode(body["content"], validate=True)
        ref = self.backend.put(content)
        return wire.BLOB_PUT_RESULT, {"locator": ref.locator, "size": ref.size}

    def _get(self, body):
        content = self.backend.get(self._ref(body))
        return wire.BLOB_GET_RESULT, {"content": base64.b64encode(content).decode("ascii")}

    def _has(self, body):
        return wire.BLOB_HAS_RESULT, {"present": self.backend.has(self._ref(body)),
                                      "backend_id": self.backend.backend_id}

    def start(self) -> BlobServer:
        self.server.start()
        return self

    def stop(self) -> None:
        self.server.stop()

    def serve_forever(self) -> None:
        self.server.serve_forever()


def blob_server(config) -> BlobServer:
    """Build a blob server from a ``Config`` (listen, data_dir, backend_id, max_blob_size)."""
    return BlobServer(
        config.path("data_dir"),
        listen=config.get("listen", "127.0.0.1:7060"),
        backend_id=config.get("backend_id", "blobs"),
        max_size=config.int("max_blob_size", DEFAULT_MAX_BLOB),
    )
