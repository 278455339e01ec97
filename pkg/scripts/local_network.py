"""Start a throwaway local network (orderer, peers, blob server) as subprocesses
and print the client config path, for trying the CLI by hand.

    python3 scripts/local_network.py /tmp/provnet --peers 4
"""

import argparse
import signal
import threading

from provledger.topology import LocalNetwork


def main():
    p = argparse.ArgumentParser()
    p.add_argument("root")
    p.add_argument("--peers", type=int, default=4)
    p.add_argument("--clients", type=int, default=1)
    p.add_argument("--batch-max-count", type=int, default=100)
    p.add_argument("--batch-timeout-ms", type=int, default=500)
    args = p.parse_args()

    net = LocalNetwork(args.root, n_peers=args.peers, n_clients=args.clients,
                       batch_max_count=args.batch_max_count,
                       batch_timeout_ms=args.batch_timeout_ms, processes=True)
    stop = threading.Event()
    signal.signal(signal.SIGINT, lambda *_: stop.set())
    signal.signal(signal.SIGTERM, lambda *_: stop.set())
    with net:
        print(f"orderer   {net.orderer_address}")
        for i, addr in enumerate(net.peer_addresses):
            print(f"peer{i}     {addr}")
        print(f"blobstore {net.blob_address}")
        print(f"client config: {net.config_path('client0')}")
        print("Ctrl-C to stop", flush=True)
        stop.wait()


if __name__ == "__main__":
    main()
