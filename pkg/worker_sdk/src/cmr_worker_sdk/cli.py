"""Worker command line.

    cmr-worker --models builtin --transport stdio
    cmr-worker --models mypkg.mymodule:build_catalog --transport socket --port 9200

stdio serves one parent process over stdin/stdout (the serving side owns
the lifecycle). Socket mode listens for a single connection, for
debugging against a persistent worker.
"""

from __future__ import annotations

import argparse
import importlib
import socket
import sys

from .models import build_catalog
from .server import serve_worker


def load_catalog(spec):
    if spec == "builtin":
        return build_catalog()
    module_name, _, attr = spec.partition(":")
    module = importlib.import_module(module_name)
    factory = getattr(module, attr or "build_catalog")
    return factory()


class _SocketIO:
    def __init__(self, sock):
        self.sock = sock

    def read(self, n):
        return self.sock.recv(n)

    def write(self, data):
        self.sock.sendall(data)
        return len(data)

    def flush(self):
        pass


def main(argv=None):
    parser = argparse.ArgumentParser(prog="cmr-worker",
                                     description="Model worker")
    parser.add_argument("--models", default="builtin",
                        help='"builtin" or module[:factory] returning a '
                             "ModelRegistry")
    parser.add_argument("--transport", default="stdio",
                        choices=["stdio", "socket"])
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument("--port", type=int, default=9200)
    args = parser.parse_args(argv)

    catalog = load_catalog(args.models)
    if args.transport == "stdio":
        return serve_worker(catalog)

    listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    listener.bind((args.host, args.port))
    listener.listen(1)
    print(f"worker listening on {args.host}:{listener.getsockname()[1]}",
          file=sys.stderr)
    sock, _ = listener.accept()
    try:
        io = _SocketIO(sock)
        return serve_worker(catalog, stdin=io, stdout=io)
    finally:
        sock.close()
        listener.close()


if __name__ == "__main__":
    raise SystemExit(main())
