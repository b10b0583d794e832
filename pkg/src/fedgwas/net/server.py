"""Wire-mode server: TCP listener, handshake intake, phase sequencing.

The accept loop stays open during the HELLO barrier so a party that died
after connecting can re-register; once all P distinct parties are healthy,
the shared ServerRuntime drives the remaining phases.  A party id clashing
with a live registration is rejected; one whose old connection is dead
replaces it, which makes the handshake idempotent across restarts.
"""

from __future__ import annotations

import socket
import time

from ..config import RunConfig
from ..qc import QcThresholds
from .frames import PhaseTag
from . import messages
from .protocol import PhaseTimeout, ProtocolError, ServerOutcome, ServerRuntime, expect
from .wire import SocketChannel


def open_listener(port: int, host: str = "127.0.0.1") -> socket.socket:
    listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    listener.bind((host, port))
    listener.listen(16)
    return listener


def _handshake(config: RunConfig, listener: socket.socket) -> dict:
    """Accept connections and collect one healthy channel per party id."""
    deadline = time.monotonic() + config.timeout_secs
    registry: dict[int, tuple[SocketChannel, bytes]] = {}
    while True:
        healthy = {
            pid: entry for pid, entry in registry.items() if not entry[0].peer_closed()
        }
        if len(healthy) == config.parties:
            registry = healthy
            break
        budget = deadline - time.monotonic()
        if budget <= 0:
            for chan, _ in registry.values():
                chan.close()
            raise PhaseTimeout("not all parties connected before the deadline")
        listener.settimeout(budget)
        try:
            sock, _addr = listener.accept()
        except socket.timeout:
            continue
        channel = SocketChannel(sock)
        try:
            frame = expect(channel.recv(deadline), PhaseTag.HELLO)
            pid, parties, _fp = messages.unpack_hello(frame.payload)
        except ProtocolError:
            channel.close()
            continue
        if parties != config.parties or not (1 <= pid <= config.parties):
            channel.send(PhaseTag.ABORT, messages.pack_abort("bad party id or count"))
            channel.close()
            continue
        if pid in registry:
            old, _ = registry[pid]
            if old.peer_closed():
                old.close()
            else:
                channel.send(PhaseTag.ABORT, messages.pack_abort("duplicate party id"))
                channel.close()
                continue
        registry[pid] = (channel, frame.payload)
    return registry


class _ReplayFirst(SocketChannel):
    """Channel view that re-delivers the already-consumed HELLO frame."""

    def __init__(self, channel: SocketChannel, first_payload: bytes):
        # adopt the underlying socket and counters so accounting carries over
        self.__dict__.update(channel.__dict__)
        self._first = first_payload

    def _recv_frame(self, deadline: float):
        if self._first is not None:
            payload, self._first = self._first, None
            from .frames import Frame

            return Frame(PhaseTag.HELLO, payload)
        return super()._recv_frame(deadline)


def run_server(config: RunConfig, listener: socket.socket,
               thresholds: QcThresholds = QcThresholds()) -> ServerOutcome:
    """Drive a full run over TCP; returns the server-side outcome (masked
    ratios, byte report).  The finished statistics live with the parties."""
    registry = _handshake(config, listener)
    links = {
        pid: _ReplayFirst(channel, payload) for pid, (channel, payload) in registry.items()
    }
    runtime = ServerRuntime(config, links, thresholds)
    try:
        return runtime.run()
    finally:
        for link in links.values():
            link.close()
