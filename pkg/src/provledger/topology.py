"""Spin up a complete local network: one orderer, N peers, a blob server.

Nodes run as threads in this process by default, or as ``provledger``
subprocesses with ``processes=True``. Every node also gets a config file under
``<root>/conf`` so the CLI can talk to the network.
"""

from __future__ import annotations

import hashlib
import os
import signal
import socket
import subprocess
import sys
import time
from pathlib import Path

from .client import ClientSession
from .config import load_config, write_config
from .identity import MembershipList, Role, generate_identity, save_membership, save_secret
from .offchain import BlobServer, RemoteBackend
from .ordering import Orderer, OrdererConfig
from .peer import Peer, PeerConfig


def free_port() -> int:
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def _seed(base: int | None, name: str) -> bytes | None:
    if base is None:
        return None
    return hashlib.sha256(f"{base}:{name}".encode()).digest()


class LocalNetwork:
    def __init__(self, root, n_peers: int = 4, n_clients: int = 4,
                 batch_max_count: int = 100, batch_timeout_ms: int = 500,
                 blob_server: bool = True, seed: int | None = 0,
                 sync_interval_s: float = 0.5, poll_interval: float = 0.01,
                 commit_timeout: float = 30.0, processes: bool = False):
        self.root = Path(root)
        self.n_peers = n_peers
        self.n_clients = n_clients
        self.batch_max_count = batch_max_count
        self.batch_timeout_ms = batch_timeout_ms
        self.with_blob_server = blob_server
        self.seed = seed
        self.sync_interval_s = sync_interval_s
        self.poll_interval = poll_interval
        self.commit_timeout = commit_timeout
        self.processes = processes

        self.orderer: Orderer | None = None
        self.peers: list[Peer | None] = []
        self.blob_server: BlobServer | None = None
        self.procs: dict[str, subprocess.Popen] = {}
        self.peer_addresses: list[str] = []
        self.orderer_address = ""
        self.blob_address = ""
        self._sessions: list[ClientSession] = []

    # -- setup -----------------------------------------------------------

    def _identities(self):
        conf = self.root / "conf"
        conf.mkdir(parents=True, exist_ok=True)
        self.orderer_key = generate_identity("orderer", Role.ORDERER, "ordererorg",
                                             _seed(self.seed, "orderer"))
        self.peer_keys = [generate_identity(f"peer{i}", Role.PEER, f"org{i % 2 + 1}",
                                            _seed(self.seed, f"peer{i}"))
                          for i in range(self.n_peers)]
        self.client_keys = [generate_identity(f"client{i}", Role.CLIENT, "org1",
                                              _seed(self.seed, f"client{i}"))
                            for i in range(self.n_clients)]
        keys = [self.orderer_key, *self.peer_keys, *self.client_keys]
        self.members = MembershipList.of(k.certificate for k in keys)
        self.membership_path = conf / "membership.txt"
        save_membership(self.members, self.membership_path)
        for k in keys:
            save_secret(k, conf / f"{k.id}.key")

    def _write_configs(self):
        conf = self.root / "conf"
        write_config(conf / "orderer.conf", {
            "id": "orderer", "listen": self.orderer_address,
            "data_dir": str(self.root / "orderer"),
            "membership": str(self.membership_path), "key": str(conf / "orderer.key"),
            "batch_max_count": self.batch_max_count, "batch_timeout_ms": self.batch_timeout_ms,
            "peers": ",".join(f"{k.id}@{a}" for k, a in zip(self.peer_keys, self.peer_addresses)),
        })
        for k, addr in zip(self.peer_keys, self.peer_addresses):
            write_config(conf / f"{k.id}.conf", {
                "id": k.id, "listen": addr, "orderer": self.orderer_address,
                "data_dir": str(self.root / k.id),
                "membership": str(self.membership_path), "key": str(conf / f"{k.id}.key"),
                "sync_interval_s": self.sync_interval_s,
            })
        if self.with_blob_server:
            write_config(conf / "blobstore.conf", {
                "listen": self.blob_address, "data_dir": str(self.root / "blobs"),
                "backend_id": "blobs",
            })
        for k in self.client_keys:
            values = {
                "id": k.id, "key": str(conf / f"{k.id}.key"),
                "membership": str(self.membership_path),
                "orderer": self.orderer_address, "peers": ",".join(self.peer_addresses),
                "commit_timeout_s": self.commit_timeout,
                "poll_interval_ms": self.poll_interval * 1000,
            }
            if self.with_blob_server:
                values["blobstore"] = f"tcp://{self.blob_address}"
            write_config(conf / f"{k.id}.conf", values)

    def config_path(self, name: str) -> Path:
        return self.root / "conf" / f"{name}.conf"

    def start(self) -> LocalNetwork:
        self._identities()
        if self.processes:
            self.orderer_address = f"127.0.0.1:{free_port()}"
            self.peer_addresses = [f"127.0.0.1:{free_port()}" for _ in self.peer_keys]
            self.blob_address = f"127.0.0.1:{free_port()}" if self.with_blob_server else ""
            self._write_configs()
            self._spawn("orderer", "orderer")
            for k in self.peer_keys:
                self._spawn(k.id, "peer")
            if self.with_blob_server:
                self._spawn("blobstore", "blobstore")
        else:
            self.orderer = Orderer(self.orderer_key, self.members, OrdererConfig(
                data_dir=str(self.root / "orderer"), listen="127.0.0.1:0",
                batch_max_count=self.batch_max_count, batch_timeout_ms=self.batch_timeout_ms,
            )).start()
            self.orderer_address = self.orderer.address
            if self.with_blob_server:
                self.blob_server = BlobServer(self.root / "blobs", "127.0.0.1:0", "blobs").start()
                self.blob_address = self.blob_server.address
            self.peers = [None] * self.n_peers
            for i in range(self.n_peers):
                self._start_peer(i, "127.0.0.1:0")
            self.peer_addresses = [p.address for p in self.peers]
            for k, addr in zip(self.peer_keys, self.peer_addresses):
                self.orderer.add_peer(k.id, addr)
            self._write_configs()
        self.wait_converged(timeout=30)
        return self

    def _start_peer(self, i: int, listen: str) -> Peer:
        k = self.peer_keys[i]
        peer = Peer(k, self.members, PeerConfig(
            data_dir=str(self.root / k.id), orderer=self.orderer_address, listen=listen,
            sync_interval_s=self.sync_interval_s,
        )).start()
        self.peers[i] = peer
        return peer

    def _spawn(self, name: str, role: str):
        log = open(self.root / f"{name}.log", "ab")
        self.procs[name] = subprocess.Popen(
            [sys.executable, "-m", "provledger", role, "--config", str(self.config_path(name))],
            stdout=log, stderr=subprocess.STDOUT,
            env={**os.environ, "PYTHONUNBUFFERED": "1"},
        )
        addr = {"orderer": self.orderer_address, "blobstore": self.blob_address}.get(
            name) or self.peer_addresses[int(name[len("peer"):])]
        _wait_listening(addr, 20.0, self.procs[name])

    # -- clients ---------------------------------------------------------

    def session(self, client: int = 0, peer: int | None = None,
                commit_timeout: float | None = None) -> ClientSession:
        """A new session for ``client<i>``; ``peer`` picks which peer it queries first."""
        cfg = load_config(self.config_path(f"client{client % self.n_clients}"))
        s = ClientSession.from_config(cfg, check_peer=False)
        if peer is not None:
            s._peers = s._peers[peer:] + s._peers[:peer]
        if commit_timeout is not None:
            s.commit_timeout = commit_timeout
        self._sessions.append(s)
        return s

    def session_factory(self):
        return lambda i: self.session(i, peer=i % self.n_peers)

    def blob_backend(self) -> RemoteBackend:
        return RemoteBackend(self.blob_address)

    # -- observation -----------------------------------------------------

    def _query_all(self, op: str) -> list[dict | None]:
        out = []
        with ClientSession(self.client_keys[0], self.orderer_address, self.peer_addresses,
                           connect_timeout=2.0) as s:
            for i in range(self.n_peers):
                try:
                    out.append(s.query({"op": op}, i))
                except Exception:
                    out.append(None)
        return out

    def orderer_height(self) -> int:
        with ClientSession(self.client_keys[0], self.orderer_address, self.peer_addresses) as s:
            return s.orderer_height()

    def heights(self) -> list[int | None]:
        return [r and r["height"] for r in self._query_all("height")]

    def digests(self) -> list[tuple[int, str] | None]:
        return [r and (r["height"], r["digest"]) for r in self._query_all("state_digest")]

    def wait_converged(self, timeout: float = 30.0) -> bool:
        """Wait until every peer matches the orderer's height and digest."""
        deadline = time.monotonic() + timeout
        while True:
            try:
                target = self.orderer_height()
                digests = self.digests()
                if all(d is not None and d[0] == target for d in digests) and \
                        len({d[1] for d in digests}) == 1:
                    return True
            except Exception:
                pass
            if time.monotonic() > deadline:
                return False
            time.sleep(0.05)

    # -- faults ----------------------------------------------------------

    def kill_peer(self, i: int) -> None:
        name = self.peer_keys[i].id
        if self.processes:
            proc = self.procs.pop(name)
            proc.send_signal(signal.SIGKILL)
            proc.wait()
        else:
            self.peers[i].stop()
            self.peers[i] = None

    def restart_peer(self, i: int) -> None:
        name = self.peer_keys[i].id
        if self.processes:
            self._spawn(name, "peer")
        else:
            self._start_peer(i, self.peer_addresses[i])

    def stop(self) -> None:
        for s in self._sessions:
            s.close()
        self._sessions.clear()
        for name, proc in list(self.procs.items()):
            proc.terminate()
            try:
                proc.wait(timeout=10)
            except subprocess.TimeoutExpired:
                proc.kill()
        self.procs.clear()
        if self.orderer is not None:
            self.orderer.stop()
        for p in self.peers:
            if p is not None:
                p.stop()
        if self.blob_server is not None:
            self.blob_server.stop()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()


def _wait_listening(addr: str, timeout: float, proc: subprocess.Popen | None = None) -> None:
    host, _, port = addr.rpartition(":")
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        if proc is not None and proc.poll() is not None:
            raise RuntimeError(f"process for {addr} exited with {proc.returncode}")
        try:
            with socket.create_connection((host, int(port)), timeout=0.5):
                return
        except OSError:
            time.sleep(0.05)
    raise TimeoutError(f"nothing listening on {addr}")
