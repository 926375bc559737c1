"""TCP transport: length-prefixed protocol frames between server and client processes."""

from __future__ import annotations

import logging
import socket
import socketserver
import threading
import time

from . import protocol as P
from .client import Client
from .errors import Truncated
from .server import Server
from .transport import Endpoint

log = logging.getLogger(__name__)


class OptimizerWorker:
    """Background thread running the server's global worker."""

    def __init__(self, server: Server, period_s: float = 0.005):
        self.server = server
        self.period_s = period_s
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._loop, name="global-optimizer", daemon=True)

    def _loop(self) -> None:
        while not self._stop.is_set():
            try:
                self.server.tick()
            except Exception:  # pragma: no cover - logged, worker keeps going
                log.exception("global worker tick failed")
            self._stop.wait(self.period_s)

    def start(self) -> "OptimizerWorker":
        self._thread.start()
        return self

    def stop(self) -> None:
        self._stop.set()
        self._thread.join(5.0)


class _Handler(socketserver.BaseRequestHandler):
    def handle(self) -> None:
        server: Server = self.server.slam
        sock = self.request
        sock.settimeout(0.02)
        buf = bytearray()
        client_id = None
        quiet = 0
        while not self.server.stopping.is_set():
            try:
                data = sock.recv(65536)
                if not data:
                    break
                buf.extend(data)
                for fr in P.split_stream(buf):
                    try:
                        client_id = P.peek_header(fr)[1]
                    except Truncated:
                        continue
                    server.on_frame(fr)
                quiet = 0
            except socket.timeout:
                quiet += 1
                if client_id is not None and quiet % 10 == 0:
                    server.idle(client_id)
            except OSError:
                break
            if client_id is not None:
                out = server.take_outgoing(client_id)
                if out:
                    try:
                        sock.sendall(b"".join(P.frame_for_stream(f) for _, _, f in out))
                    except OSError:
                        break


class FrameListener(socketserver.ThreadingTCPServer):
    """Accepts client connections; one handler thread per connection."""

    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, slam: Server, host: str = "127.0.0.1", port: int = 0):
        self.slam = slam
        self.stopping = threading.Event()
        super().__init__((host, port), _Handler)
        self._thread: threading.Thread | None = None

    @property
    def address(self) -> tuple[str, int]:
        return self.server_address[:2]

    def start(self) -> "FrameListener":
        self._thread = threading.Thread(target=self.serve_forever, kwargs={"poll_interval": 0.05},
                                        name="frame-listener", daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self.stopping.set()
        self.shutdown()
        self.server_close()


class SocketClientLink:
    """Client side of a TCP link: reliable endpoint per session over one connection."""

    def __init__(self, client: Client, host: str, port: int, window: int = 256, timeout: float = 10.0):
        self.client = client
        self.sock = socket.create_connection((host, port), timeout=timeout)
        self.sock.settimeout(0.0)
        self.window = window
        self.endpoint: Endpoint | None = None
        self.session = 0
        self.buf = bytearray()
        self.bytes_up = 0
        self.bytes_down = 0

    def _send(self, frame: bytes) -> None:
        self.bytes_up += len(frame)
        self.sock.setblocking(True)
        try:
            self.sock.sendall(P.frame_for_stream(frame))
        finally:
            self.sock.setblocking(False)

    def flush(self) -> None:
        c = self.client
        if not c.outbox:
            return
        if c.session_id != self.session:
            self.endpoint = Endpoint(c.cfg.client_id, c.session_id, self.window)
            self.session = c.session_id
        for m in c.outbox:
            self._send(self.endpoint.send(m))
        c.outbox.clear()

    def poll(self, wait: float = 0.0) -> int:
        """Read and apply whatever the server sent; returns frames handled."""
        deadline = time.monotonic() + wait
        n = 0
        while True:
            try:
                data = self.sock.recv(65536)
                if not data:
                    raise ConnectionError("server closed the connection")
                self.buf.extend(data)
                self.bytes_down += len(data)
            except BlockingIOError:
                if time.monotonic() >= deadline:
                    break
                time.sleep(0.002)
                continue
            for fr in P.split_stream(self.buf):
                n += 1
                m = P.decode(fr)
                if self.endpoint is None or m.session_id != self.client.session_id:
                    continue
                delivered, replies = self.endpoint.receive(m)
                for r in replies:
                    self._send(r)
                for msg in delivered:
                    self.client.apply_server_message(msg)
        self.flush()
        return n

    def settle(self, timeout: float = 10.0) -> bool:
        end = time.monotonic() + timeout
        while time.monotonic() < end:
            self.poll(0.05)
            if self.endpoint is None or self.endpoint.settled():
                return True
            for fr in self.endpoint.idle():
                self._send(fr)
        return False

    def close(self) -> None:
        try:
            self.sock.close()
        except OSError:  # pragma: no cover
            pass
