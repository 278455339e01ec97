"""Closed-loop benchmark driver.

Each of ``concurrency`` workers owns one client session and issues its next
operation only after the previous one is confirmed (committed for writes,
answered for reads). Latency is measured from call start to confirmation.
"""

from __future__ import annotations

import csv
import hashlib
import os
import random
import threading
import time
import uuid
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .errors import ProvLedgerError, SetupFailure

MODES = ("post-only", "store-data", "get", "get-data", "mixed")
DEFAULT_SIZES = (1024, 10 * 1024, 100 * 1024, 1024 * 1024)
CSV_COLUMNS = ("mode", "payload_size", "ops", "errors", "elapsed_s", "throughput_ops_s",
               "p50_ms", "p90_ms", "p99_ms")


@dataclass(frozen=True)
class WorkloadSpec:
    mode: str = "store-data"
    payload_size: int = 1024
    concurrency: int = 1
    duration_s: float | None = None
    total_ops: int | None = None
    sizes: tuple[int, ...] = DEFAULT_SIZES
    seed: int = 0
    key_prefix: str = "bench"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.payload_size < 0 or self.concurrency < 1:
            raise ValueError("payload_size must be >= 0 and concurrency >= 1")
        if (self.duration_s is None) == (self.total_ops is None):
            raise ValueError("give exactly one of duration_s and total_ops")
        if self.duration_s is not None and self.duration_s <= 0:
            raise ValueError("duration_s must be positive")
        if self.total_ops is not None and self.total_ops < 1:
            raise ValueError("total_ops must be positive")
        if any(s <= 0 for s in self.sizes):
            raise ValueError("sweep sizes must be positive")


@dataclass
class BenchRow:
    mode: str
    payload_size: int
    ops: int
    errors: int
    elapsed_s: float
    throughput_ops_s: float
    p50_ms: float
    p90_ms: float
    p99_ms: float


@dataclass
class BenchReport:
    rows: list[BenchRow] = field(default_factory=list)
    started_at: float = field(default_factory=time.time)
    finished_at: float | None = None


def payload_stream(seed: int, payload_size: int, worker: int):
    """Endless reproducible payloads for one worker."""
    rng = random.Random(f"{seed}:{payload_size}:{worker}")
    while True:
        yield rng.randbytes(payload_size)


def percentiles(latencies_ms) -> tuple[float, float, float]:
    if len(latencies_ms) == 0:
        return float("nan"), float("nan"), float("nan")
    p50, p90, p99 = np.percentile(np.asarray(latencies_ms, dtype=float), [50, 90, 99])
    return float(p50), float(p90), float(p99)


class _Worker:
    def __init__(self, spec: WorkloadSpec, session, index: int, run_id: str):
        self.spec = spec
        self.session = session
        self.index = index
        self.prefix = f"{spec.key_prefix}/{run_id}/w{index}"
        self.payloads = payload_stream(spec.seed, spec.payload_size, index)
        self.rng = random.Random(f"{spec.seed}:mix:{index}")
        self.n = 0
        self.read_key: str | None = None
        self.latencies: list[float] = []
        self.errors = 0

    def _key(self) -> str:
        self.n += 1
        return f"{self.prefix}/{self.n}"

    def setup(self):
        if self.spec.mode in ("get", "mixed"):
            payload = next(self.payloads)
            self.read_key = self._key()
            self.session.post(self.read_key, hashlib.sha256(payload).digest())
        elif self.spec.mode == "get-data":
            self.read_key = self._key()
            self.session.store_data(self.read_key, next(self.payloads))

    def one(self, payload: bytes):
        mode = self.spec.mode
        if mode == "mixed":
            mode = self.rng.choice(("post-only", "store-data", "get"))
            if mode == "post-only":
                payload = b""
        if mode == "post-only":
            self.session.post(self._key(), hashlib.sha256(payload).digest(), custom=payload)
        elif mode == "store-data":
            self.session.store_data(self._key(), payload)
        elif mode == "get":
            self.session.get(self.read_key)
        elif mode == "get-data":
            self.session.get_data(self.read_key)

    def run(self, quota: int | None, deadline: float | None):
        while (quota is None or len(self.latencies) + self.errors < quota) and \
                (deadline is None or time.perf_counter() < deadline):
            payload = next(self.payloads) if self.spec.mode != "get" else b""
            t0 = time.perf_counter()
            try:
                self.one(payload)
            except ProvLedgerError:
                self.errors += 1
                continue
            self.latencies.append((time.perf_counter() - t0) * 1000.0)


def run_workload(spec: WorkloadSpec, session_factory) -> BenchRow:
    """Run one configuration; ``session_factory(i)`` returns worker i's session."""
    run_id = uuid.uuid4().hex[:8]
    try:
        workers = [_Worker(spec, session_factory(i), i, run_id) for i in range(spec.concurrency)]
        for w in workers:
            w.setup()
    except ProvLedgerError as exc:
        raise SetupFailure(f"benchmark setup failed: {exc}") from exc

    quotas = [None] * spec.concurrency
    if spec.total_ops is not None:
        base, extra = divmod(spec.total_ops, spec.concurrency)
        quotas = [base + (i < extra) for i in range(spec.concurrency)]

    start = time.perf_counter()
    deadline = None if spec.duration_s is None else start + spec.duration_s
    threads = [threading.Thread(target=w.run, args=(q, deadline), daemon=True)
               for w, q in zip(workers, quotas)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    elapsed = time.perf_counter() - start

    latencies = [x for w in workers for x in w.latencies]
    ops = len(latencies)
    p50, p90, p99 = percentiles(latencies)
    return BenchRow(
        mode=spec.mode,
        payload_size=spec.payload_size,
        ops=ops,
        errors=sum(w.errors for w in workers),
        elapsed_s=elapsed,
        throughput_ops_s=ops / elapsed if elapsed > 0 else 0.0,
        p50_ms=p50,
        p90_ms=p90,
        p99_ms=p99,
    )


def run_sweep(sizes, base: WorkloadSpec, session_factory, on_row=None) -> BenchReport:
    sizes = list(sizes)
    if not sizes:
        raise ValueError("sweep needs at least one size")
    report = BenchReport()
    for size in sizes:
        row = run_workload(replace(base, payload_size=size), session_factory)
        report.rows.append(row)
        if on_row is not None:
            on_row(row)
    report.finished_at = time.time()
    return report


def emit_csv(report: BenchReport, path) -> Path:
    """Write header plus one line per row; replaces any existing file atomically."""
    path = Path(path)
    tmp = path.with_name(f".{path.name}.{os.getpid()}.tmp")
    with open(tmp, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for row in report.rows:
            w.writerow([repr(v) if isinstance(v, float) else v
                        for v in (getattr(row, c) for c in CSV_COLUMNS)])
    os.replace(tmp, path)
    return path


def read_csv(path) -> list[BenchRow]:
    types = {f.name: f.type for f in fields(BenchRow)}
    conv = {"str": str, "int": int, "float": float}
    with open(path, newline="") as fh:
        return [BenchRow(**{k: conv[types[k]](v) for k, v in r.items()})
                for r in csv.DictReader(fh)]
