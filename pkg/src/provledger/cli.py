"""``provledger`` command line: run nodes, drive the client SDK, benchmark,
and inspect ledger directories. Client commands print JSON on stdout."""

from __future__ import annotations

import argparse
import base64
import json
import logging
import signal
import sys
import threading
from pathlib import Path

from . import errors
from .config import load_config

EXIT_CODES = [
    (errors.BadConfig, 3),
    (errors.NotFound, 4),
    (errors.AdmissionRejected, 5),
    (errors.CommitTimeout, 6),
    (errors.Unreachable, 7),
    (errors.IntegrityViolation, 8),
    (errors.NoDataLocator, 9),
    (errors.Oversize, 10),
    (errors.SetupFailure, 11),
    (errors.OrphanBlob, 12),
    (errors.InvalidArgument, 13),
]


def exit_code_for(exc: errors.ProvLedgerError) -> int:
    for cls, code in EXIT_CODES:
        if isinstance(exc, cls):
            return code
    return 1


def _emit(obj) -> None:
    json.dump(obj, sys.stdout, indent=2, sort_keys=True)
    sys.stdout.write("\n")


def _serve(node) -> int:
    stop = threading.Event()
    for sig in (signal.SIGINT, signal.SIGTERM):
        signal.signal(sig, lambda *_: stop.set())
    node.start()
    logging.getLogger("provledger").info("listening on %s", node.address)
    stop.wait()
    node.stop()
    return 0


def cmd_orderer(args) -> int:
    from .ordering import OrdererConfig, build_orderer

    return _serve(build_orderer(OrdererConfig.from_config(load_config(args.config))))


def cmd_peer(args) -> int:
    from .peer import PeerConfig, build_peer

    return _serve(build_peer(PeerConfig.from_config(load_config(args.config))))


def cmd_blobstore(args) -> int:
    from .offchain import blob_server

    return _serve(blob_server(load_config(args.config)))


def _parent(text: str):
    from .provenance import ParentRef, Version

    try:
        key, _, ver = text.rpartition("@")
        block, _, idx = ver.partition(".")
        return ParentRef(key, Version(int(block), int(idx)))
    except ValueError:
        raise argparse.ArgumentTypeError(f"parent must look like key@block.tx_index: {text!r}")


def _custom(args) -> bytes:
    if args.custom_b64 is not None:
        return base64.b64decode(args.custom_b64)
    return (args.custom or "").encode("utf-8")


def cmd_client(args) -> int:
    from .client import init

    with init(args.config) as s:
        if args.action == "post":
            r = s.post(args.key, bytes.fromhex(args.checksum), args.locator, args.parent, _custom(args))
            _emit({"key": r.key, "block": r.version.block, "tx_index": r.version.tx_index,
                   "tx_id": r.tx_id.hex()})
        elif args.action == "get":
            r = s.get(args.key)
            _emit({"record": r.record.to_json(), "block": r.version.block,
                   "tx_index": r.version.tx_index, "height": r.height})
        elif args.action == "store":
            content = Path(args.file).read_bytes()
            r = s.store_data(args.key, content, args.parent, _custom(args))
            _emit({"key": r.key, "locator": r.blob.locator, "size": r.blob.size,
                   "block": r.version.block, "tx_index": r.version.tx_index,
                   "tx_id": r.tx_id.hex()})
        elif args.action == "fetch":
            content, record = s.get_data(args.key)
            out = {"record": record.to_json(), "size": len(content)}
            if args.out:
                Path(args.out).write_bytes(content)
                out["written_to"] = args.out
            else:
                out["content"] = base64.b64encode(content).decode("ascii")
            _emit(out)
        elif args.action == "history":
            _emit(s.get_history(args.key).to_json())
        elif args.action == "lineage":
            _emit(s.get_lineage(args.key, args.max_depth).to_json())
        elif args.action == "height":
            _emit({"height": s.height(), "orderer_height": s.orderer_height()})
        elif args.action == "digest":
            digest, height = s.state_digest()
            _emit({"digest": digest.hex(), "height": height})
    return 0


def cmd_bench(args) -> int:
    from .bench import WorkloadSpec, emit_csv, run_sweep
    from .client import ClientSession

    cfg = load_config(args.config)
    sizes = [int(x) for x in args.sizes.split(",")] if args.sizes else [args.payload_size]
    spec = WorkloadSpec(
        mode=args.mode, payload_size=sizes[0], concurrency=args.concurrency,
        duration_s=args.duration if args.total_ops is None else None,
        total_ops=args.total_ops, sizes=tuple(sizes), seed=args.seed,
    )

    def factory(i):
        return ClientSession.from_config(cfg)

    def progress(row):
        print(f"{row.mode} size={row.payload_size} ops={row.ops} errors={row.errors} "
              f"tput={row.throughput_ops_s:.2f}/s p50={row.p50_ms:.1f}ms", file=sys.stderr)

    report = run_sweep(sizes, spec, factory, on_row=progress)
    if args.out:
        emit_csv(report, args.out)
    else:
        from .bench import CSV_COLUMNS

        print(",".join(CSV_COLUMNS))
        for r in report.rows:
            print(",".join(str(getattr(r, c)) for c in CSV_COLUMNS))
    return 0


def cmd_keygen(args) -> int:
    from .identity import MembershipList, Role, generate_identity, save_membership, save_secret

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    keys = [generate_identity("orderer", Role.ORDERER, "ordererorg")]
    keys += [generate_identity(f"peer{i}", Role.PEER, f"org{i % 2 + 1}") for i in range(args.peers)]
    keys += [generate_identity(f"client{i}", Role.CLIENT, "org1") for i in range(args.clients)]
    save_membership(MembershipList.of(k.certificate for k in keys), out / "membership.txt")
    for k in keys:
        save_secret(k, out / f"{k.id}.key")
    _emit({"membership": str(out / "membership.txt"), "identities": [k.id for k in keys]})
    return 0


def cmd_dump_block(args) -> int:
    from .ledger import Block, block_path

    try:
        raw = block_path(args.data_dir, args.number).read_bytes()
    except FileNotFoundError:
        raise errors.NotFound(f"block {args.number} not found in {args.data_dir}") from None
    _emit(Block.from_bytes(raw).to_json())
    return 0


def cmd_verify_chain(args) -> int:
    from .identity import load_membership
    from .ledger import verify_chain

    report = verify_chain(args.data_dir, load_membership(args.membership))
    _emit(report.to_json())
    return 0 if report.ok else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="provledger", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    for name, fn, helptext in (("orderer", cmd_orderer, "run the ordering service"),
                               ("peer", cmd_peer, "run a peer node"),
                               ("blobstore", cmd_blobstore, "run the off-chain blob server")):
        sp = sub.add_parser(name, help=helptext)
        sp.add_argument("--config", required=True)
        sp.set_defaults(func=fn)

    cp = sub.add_parser("client", help="client SDK operations")
    cp.add_argument("--config", required=True)
    cp.set_defaults(func=cmd_client)
    actions = cp.add_subparsers(dest="action", required=True)
    for name in ("post", "store"):
        a = actions.add_parser(name)
        a.add_argument("key")
        if name == "post":
            a.add_argument("--checksum", required=True, help="hex SHA-256 of the data item")
            a.add_argument("--locator", default="")
        else:
            a.add_argument("file")
        a.add_argument("--parent", action="append", type=_parent, default=[],
                       help="key@block.tx_index (repeatable)")
        a.add_argument("--custom")
        a.add_argument("--custom-b64")
    for name in ("get", "history"):
        actions.add_parser(name).add_argument("key")
    fa = actions.add_parser("fetch")
    fa.add_argument("key")
    fa.add_argument("--out")
    la = actions.add_parser("lineage")
    la.add_argument("key")
    la.add_argument("--max-depth", type=int)
    actions.add_parser("height")
    actions.add_parser("digest")

    bp = sub.add_parser("bench", help="throughput / response-time sweep")
    bp.add_argument("--config", required=True, help="client config")
    bp.add_argument("--mode", default="store-data")
    bp.add_argument("--sizes", help="comma-separated payload sizes in bytes")
    bp.add_argument("--payload-size", type=int, default=1024)
    bp.add_argument("--concurrency", type=int, default=1)
    bp.add_argument("--duration", type=float, default=60.0)
    bp.add_argument("--total-ops", type=int)
    bp.add_argument("--seed", type=int, default=0)
    bp.add_argument("--out")
    bp.set_defaults(func=cmd_bench)

    kp = sub.add_parser("keygen", help="create identities and a membership file")
    kp.add_argument("--out", required=True)
    kp.add_argument("--peers", type=int, default=4)
    kp.add_argument("--clients", type=int, default=1)
    kp.set_defaults(func=cmd_keygen)

    dp = sub.add_parser("dump-block", help="print one persisted block as JSON")
    dp.add_argument("data_dir")
    dp.add_argument("number", type=int)
    dp.set_defaults(func=cmd_dump_block)

    vp = sub.add_parser("verify-chain", help="re-verify a ledger directory")
    vp.add_argument("data_dir")
    vp.add_argument("--membership", required=True)
    vp.set_defaults(func=cmd_verify_chain)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except errors.ProvLedgerError as exc:
        print(json.dumps({"error": exc.code, "message": str(exc)}), file=sys.stderr)
        return exit_code_for(exc)
