import os
import random

import pytest

from ucrdma import Access, EndpointConfig, ImpairmentSpec, WorkRequest
from ucrdma.loopback import connected_pair


@pytest.fixture
def pair():
    p = connected_pair()
    yield p
    p.close()


@pytest.fixture
def make_pair():
    made = []

    def factory(config: EndpointConfig | None = None, **kw):
        p = connected_pair(config, **kw)
        made.append(p)
        return p

    yield factory
    for p in made:
        p.close()


def pattern(n: int, seed: int = 0) -> bytearray:
    return bytearray(random.Random(seed).randbytes(n))


def raw_fragments(pair, wr, msn, max_payload=1408):
    """Encode the datagrams the client would send for ``wr`` without sending them."""
    from ucrdma.engine import segment_message
    from ucrdma.wire import encode_header

    src = pair.client._regions[wr.stag].view
    return [encode_header(h, payload_len=len(p)) + bytes(p)
            for h, p in segment_message(wr, msn, max_payload, src, conn_id=pair.cqp.remote_conn_id)]


def inject(pair, datagrams):
    """Send raw datagrams from the client's socket to the server, then let the server run."""
    for dg in datagrams:
        pair.client.sock.sendto(dg, pair.server.address)
    pair.server.progress()


ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)


def needs_cpus(n: int):
    return pytest.mark.skipif((os.cpu_count() or 1) < n, reason=f"needs {n} CPUs")


__all__ = ["Access", "ImpairmentSpec", "WorkRequest", "pattern", "raw_fragments", "inject"]
