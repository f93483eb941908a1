"""Single-threaded, in-process harness: two endpoints driven in lockstep.

With a :class:`VirtualClock`, timers (reassembly timeouts, read deadlines,
handshake retransmissions) fire by advancing virtual time instead of
sleeping, so runs are fast and repeatable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .engine import Endpoint, EndpointConfig
from .impair import ImpairmentSpec
from .verbs import QPState, QueuePair


class VirtualClock:
    def __init__(self, start: float = 1000.0):
        self.now = start

    def __call__(self) -> float:
        return self.now

    def advance_to(self, t: float) -> None:
        if t > self.now:
            self.now = t


def _traffic(endpoints) -> int:
    return sum(ep.counters.datagrams_rx + ep.counters.datagrams_tx for ep in endpoints)


def pump(*endpoints: Endpoint, until=None, clock: VirtualClock | None = None,
         max_rounds: int = 1_000_000, idle_rounds: int = 2) -> bool:
    """Progress ``endpoints`` until ``until()`` holds or nothing is left to do.

    When the endpoints go quiet and a virtual clock is given, time jumps to
    the earliest pending deadline. Returns whether ``until`` was satisfied
    (True when no predicate was given and the system went idle).
    """
    idle = 0
    for _ in range(max_rounds):
        if until is not None and until():
            return True
        before = _traffic(endpoints)
        now = clock() if clock is not None else None
        for ep in endpoints:
            ep.progress(now)
        if _traffic(endpoints) != before or any(ep._txq or ep._tx_pending for ep in endpoints):
            idle = 0
            continue
        idle += 1
        if idle < idle_rounds:
            continue
        if clock is None:
            return until is None
        due = min(ep.next_deadline() for ep in endpoints)
        if math.isinf(due):
            return until() if until is not None else True
        clock.advance_to(due)
        idle = 0
    return until() if until is not None else False


@dataclass
class Pair:
    client: Endpoint
    server: Endpoint
    cqp: QueuePair
    sqp: QueuePair
    clock: VirtualClock

    def pump(self, until=None, **kw) -> bool:
        return pump(self.client, self.server, until=until, clock=self.clock, **kw)

    def close(self) -> None:
        self.client.close()
        self.server.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def connected_pair(config: EndpointConfig | None = None, *,
                   server_config: EndpointConfig | None = None,
                   impairment: ImpairmentSpec | None = None,
                   server_impairment: ImpairmentSpec | None = None,
                   on_request=None) -> Pair:
    """Two endpoints on 127.0.0.1 with one established connection between them.

    ``impairment`` applies to the client's transmit path (the data direction);
    ``server_impairment`` to the reverse path.
    """
    clock = VirtualClock()
    config = config or EndpointConfig()
    server = Endpoint(server_config or config, clock=clock, impairment=server_impairment)
    listener = server.listen(0, on_request=on_request)
    client = Endpoint(config, clock=clock, impairment=impairment)
    cqp = client.create_qp()
    client.connect(cqp, server.address, wait=False)
    pump(client, server, clock=clock,
         until=lambda: cqp.state is not QPState.CONNECTING and bool(listener._accepted))
    if cqp.state is not QPState.CONNECTED:
        raise RuntimeError(f"handshake failed: {cqp.state} {cqp.error}")
    sqp = listener.accept(timeout=0)
    return Pair(client, server, cqp, sqp, clock)
