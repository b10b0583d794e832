"""TCP transport: socket-backed channels and framed stream IO."""

from __future__ import annotations

import socket
import time

from .frames import FrameError, HEADER, MAX_PAYLOAD, read_frame
from .protocol import Channel, PhaseTimeout, ProtocolError


class ConnectionClosed(ProtocolError):
    pass


class SocketChannel(Channel):
    def __init__(self, sock: socket.socket):
        super().__init__()
        self.sock = sock

    def _send_bytes(self, data: bytes):
        try:
            self.sock.sendall(data)
        except OSError as exc:
            raise ConnectionClosed(f"send failed: {exc}") from exc

    def _recv_frame(self, deadline: float):
        def read_exact(n: int) -> bytes:
            chunks = []
            got = 0
            while got < n:
                budget = deadline - time.monotonic()
                if budget <= 0:
                    raise PhaseTimeout("no message before the phase deadline")
                self.sock.settimeout(budget)
                try:
                    chunk = self.sock.recv(min(n - got, 1 << 20))
                except socket.timeout:
                    raise PhaseTimeout("no message before the phase deadline") from None
                except OSError as exc:
                    raise ConnectionClosed(f"recv failed: {exc}") from exc
                if not chunk:
                    raise ConnectionClosed("peer closed the connection")
                chunks.append(chunk)
                got += len(chunk)
            return b"".join(chunks)

        return read_frame(read_exact)

    def close(self):
        try:
            self.sock.close()
        except OSError:
            pass

    def peer_closed(self) -> bool:
        """Non-blocking EOF probe; true when the peer has shut down."""
        try:
            self.sock.setblocking(False)
            try:
                data = self.sock.recv(1, socket.MSG_PEEK)
                return data == b""
            finally:
                self.sock.setblocking(True)
        except BlockingIOError:
            return False
        except OSError:
            return True


def connect_with_retry(address, attempts: int = 3, base_delay: float = 0.2) -> socket.socket:
    """Dial the server, retrying with backoff on connection loss."""
    last = None
    for attempt in range(attempts):
        try:
            return socket.create_connection(address, timeout=30.0)
        except OSError as exc:
            last = exc
            time.sleep(base_delay * (2**attempt))
    raise ConnectionClosed(f"could not reach server at {address}: {last}")
