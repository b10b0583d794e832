"""In-process protocol run over queue-backed channels.

Every message still travels as encoded frame bytes, so byte accounting and
results are identical to wire mode; parties run on threads, the server on
the calling thread, and all server computation happens behind barriers in
party-id order exactly as on the wire.
"""

from __future__ import annotations

import queue
import threading
from dataclasses import dataclass

from ..assoc import AssocResultSet
from ..blockstore import Dataset, horizontal_split
from ..config import RunConfig
from ..qc import QcThresholds
from ..seedcraft import key_from_int
from ..transform import Onboarding
from .frames import decode_frame
from .protocol import (Channel, PartyRuntime, PhaseTimeout, ProtocolError,
                       ServerOutcome, ServerRuntime)


class QueueChannel(Channel):
    """One endpoint of an in-memory duplex link carrying encoded frames."""

    def __init__(self, inbox: queue.Queue, outbox: queue.Queue):
        super().__init__()
        self.inbox = inbox
        self.outbox = outbox

    def _send_bytes(self, data: bytes):
        self.outbox.put(data)

    def _recv_frame(self, deadline: float):
        import time

        budget = max(0.0, deadline - time.monotonic())
        try:
            data = self.inbox.get(timeout=budget)
        except queue.Empty:
            raise PhaseTimeout("no message before the phase deadline") from None
        return decode_frame(data)


def channel_pair():
    a, b = queue.Queue(), queue.Queue()
    return QueueChannel(a, b), QueueChannel(b, a)


@dataclass
class SimulationResult:
    results: AssocResultSet
    outcome: ServerOutcome
    party_errors: dict


def run_simulator(config: RunConfig, dataset: Dataset, parties: int | None = None,
                  thresholds: QcThresholds = QcThresholds(),
                  party_hook=None) -> SimulationResult:
    """Split `dataset` across the configured parties and run all phases.

    `party_hook` may replace a party's runtime factory (protocol robustness
    tests use it to inject misbehaving parties).
    """
    parties = parties or config.parties
    if parties != config.parties:
        config = RunConfig(**{**config.__dict__, "parties": parties})
    shards = horizontal_split(dataset, parties, config.effective_plan_seed)
    onboarding = Onboarding(tuple(s.manifest.samples for s in shards))
    root = key_from_int(config.seed)

    links = {}
    runtimes = []
    for shard in shards:
        server_end, party_end = channel_pair()
        links[shard.manifest.party_id] = server_end
        runtime = PartyRuntime(party_end, shard, config, onboarding, root, thresholds)
        if party_hook is not None:
            runtime = party_hook(runtime) or runtime
        runtimes.append(runtime)

    results = {}
    errors = {}

    def drive(runtime):
        try:
            results[runtime.party] = runtime.run()
        except Exception as exc:  # collected for the caller; threads must not die silently
            errors[runtime.party] = exc

    threads = [threading.Thread(target=drive, args=(rt,), daemon=True) for rt in runtimes]
    for t in threads:
        t.start()
    server = ServerRuntime(config, links, thresholds)
    outcome = server.run()
    for t in threads:
        t.join(timeout=config.timeout_secs)

    if errors:
        party, exc = next(iter(sorted(errors.items())))
        raise ProtocolError(f"party {party} failed: {exc}") from exc
    first = results[min(results)].results
    return SimulationResult(first, outcome, errors)
