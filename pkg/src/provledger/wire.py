"""Length-prefixed JSON framing over TCP.

A frame is a 4-byte big-endian length followed by UTF-8 JSON of the form
``{"type": ..., "body": {...}}``. Failures are answered with an ``error``
frame carrying ``code`` and ``message``; the connection stays usable.
"""

from __future__ import annotations

import json
import logging
import socket
import socketserver
import struct
import threading

from .errors import ProtocolError, ProvLedgerError, Unreachable, from_wire

log = logging.getLogger(__name__)

HEADER = struct.Struct(">I")
MAX_FRAME = 256 * 1024 * 1024

SUBMIT_TX = "submit_tx"
SUBMIT_ACK = "submit_ack"
BLOCK_DELIVER = "block_deliver"
BLOCK_ACK = "block_ack"
QUERY = "query"
QUERY_RESULT = "query_result"
SYNC_REQUEST = "sync_request"
SYNC_BLOCKS = "sync_blocks"
ERROR = "error"
BLOB_PUT = "blob_put"
BLOB_PUT_RESULT = "blob_put_result"
BLOB_GET = "blob_get"
BLOB_GET_RESULT = "blob_get_result"
BLOB_HAS = "blob_has"
BLOB_HAS_RESULT = "blob_has_result"


def parse_address(addr: str) -> tuple[str, int]:
    host, _, port = addr.strip().rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"bad address {addr!r}, expected host:port")
    return host, int(port)


def format_address(addr: tuple[str, int]) -> str:
    return f"{addr[0]}:{addr[1]}"


def encode_frame(msg_type: str, body: dict) -> bytes:
    raw = json.dumps({"type": msg_type, "body": body}, separators=(",", ":")).encode("utf-8")
    if len(raw) > MAX_FRAME:
        raise ProtocolError(f"frame of {len(raw)} bytes exceeds limit")
    return HEADER.pack(len(raw)) + raw


def decode_frame(raw: bytes) -> tuple[str, dict]:
    try:
        msg = json.loads(raw.decode("utf-8"))
        msg_type, body = msg["type"], msg.get("body", {})
    except (UnicodeDecodeError, ValueError, KeyError, TypeError) as exc:
        raise ProtocolError(f"undecodable frame: {exc}") from exc
    if not isinstance(msg_type, str) or not isinstance(body, dict):
        raise ProtocolError("frame needs string type and object body")
    return msg_type, body


def _recv_exact(sock: socket.socket, n: int) -> bytes | None:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(min(n - len(buf), 1 << 20))
        if not chunk:
            return None
        buf += chunk
    return bytes(buf)


def send_frame(sock: socket.socket, msg_type: str, body: dict) -> None:
    sock.sendall(encode_frame(msg_type, body))


def recv_frame(sock: socket.socket) -> tuple[str, dict] | None:
    """Read one frame; None on clean EOF. A bad JSON payload raises ProtocolError
    after the frame has been consumed, so the stream stays in sync."""
    hdr = _recv_exact(sock, HEADER.size)
    if hdr is None:
        return None
    (n,) = HEADER.unpack(hdr)
    if n > MAX_FRAME:
        raise ConnectionError(f"frame length {n} exceeds limit")
    raw = _recv_exact(sock, n)
    if raw is None:
        return None
    return decode_frame(raw)


def error_body(exc: ProvLedgerError) -> dict:
    return {"code": exc.code, "message": str(exc)}


class _Handler(socketserver.BaseRequestHandler):
    def handle(self):
        sock = self.request
        server: FramedServer = self.server
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        server._track(sock, True)
        try:
            while True:
                try:
                    msg = recv_frame(sock)
                except ProtocolError as exc:
                    send_frame(sock, ERROR, error_body(exc))
                    continue
                if msg is None:
                    return
                send_frame(sock, *server.respond(*msg))
        except OSError:
            return
        finally:
            server._track(sock, False)


class FramedServer(socketserver.ThreadingTCPServer):
    """Thread-per-connection server; ``handlers`` maps message type to a
    function ``body -> (reply_type, reply_body)``."""

    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, address: tuple[str, int], handlers: dict):
        self.handlers = handlers
        self._conns: set[socket.socket] = set()
        self._conns_lock = threading.Lock()
        self._thread: threading.Thread | None = None
        super().__init__(address, _Handler)

    @property
    def address(self) -> str:
        return format_address(self.server_address[:2])

    def respond(self, msg_type: str, body: dict) -> tuple[str, dict]:
        handler = self.handlers.get(msg_type)
        if handler is None:
            return ERROR, {"code": "unknown-type", "message": f"unknown message type {msg_type!r}"}
        try:
            return handler(body)
        except ProvLedgerError as exc:
            return ERROR, error_body(exc)
        except (KeyError, ValueError, TypeError) as exc:
            return ERROR, {"code": "malformed-message", "message": f"bad {msg_type} body: {exc!r}"}
        except Exception as exc:  # keep serving other requests
            log.exception("handler for %s failed", msg_type)
            return ERROR, {"code": "internal", "message": repr(exc)}

    def _track(self, sock, add: bool):
        with self._conns_lock:
            (self._conns.add if add else self._conns.discard)(sock)

    def start(self) -> FramedServer:
        self._thread = threading.Thread(target=self.serve_forever, args=(0.05,), name=f"server-{self.address}",
                                        daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        """Stop accepting and drop every open connection."""
        self.shutdown()
        self.server_close()
        with self._conns_lock:
            conns = list(self._conns)
        for s in conns:
            try:
                s.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
        if self._thread is not None:
            self._thread.join(timeout=5)


class Connection:
    """A lazily dialled client connection; one request in flight at a time."""

    def __init__(self, address: str, timeout: float = 10.0, unreachable=Unreachable):
        self.address = address
        self.timeout = timeout
        self.unreachable = unreachable
        self._sock: socket.socket | None = None
        self._lock = threading.Lock()

    def _connect(self) -> socket.socket:
        try:
            sock = socket.create_connection(parse_address(self.address), timeout=self.timeout)
        except (OSError, ValueError) as exc:
            raise self.unreachable(f"cannot reach {self.address}: {exc}") from exc
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        return sock

    def request(self, msg_type: str, body: dict, expect: str | None = None,
                error_class=ProvLedgerError) -> dict:
        """Send one frame and return the reply body.

        An ``error`` reply is raised via ``from_wire``; a dead connection
        raises the configured unreachable error and is re-dialled next call.
        """
        with self._lock:
            try:
                if self._sock is None:
                    self._sock = self._connect()
                send_frame(self._sock, msg_type, body)
                reply = recv_frame(self._sock)
                if reply is None:
                    raise ConnectionError("connection closed by peer")
            except OSError as exc:
                self._close()
                raise self.unreachable(f"{self.address}: {exc}") from exc
            except ProtocolError:
                self._close()
                raise
        rtype, rbody = reply
        if rtype == ERROR:
            raise from_wire(rbody.get("code", "error"), rbody.get("message", ""), error_class)
        if expect is not None and rtype != expect:
            raise ProtocolError(f"expected {expect}, got {rtype}")
        return rbody

    def _close(self):
        if self._sock is not None:
            try:
                self._sock.close()
            except OSError:
                pass
            self._sock = None

    def close(self):
        with self._lock:
            self._close()
