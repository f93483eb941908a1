"""Station traffic generator: rate-controlled, sequence-numbered message streams.

Each stream is paced by its own token bucket on its own thread. A message
starts with a 64-bit little-endian sequence number, followed by a window of
a per-stream pseudo-random pattern chosen by that number, so the receiver
can count loss exactly and check every payload byte without keeping a copy.
Messages shorter than eight bytes carry a truncated sequence number.

The receiving side is one process with one endpoint per stream, on
consecutive ports when started from the command line.
"""

from __future__ import annotations

import argparse
import json
import logging
import multiprocessing as mp
import random
import sys
import threading
import time
from dataclasses import asdict, dataclass, field

from .impair import ImpairmentSpec, parse_addr
from .metrics import write_csv
from .transports import (MAX_MESSAGE, UDP_MAX, TokenBucket, Transport, TransportError, TransportOptions,
                         make_receiver, make_sender, run_receivers)

log = logging.getLogger(__name__)

SEQ_BYTES = 8
PATTERN_SPAN = 4096  # distinct pattern offsets a message can start at
DRAIN_GRACE = 0.5


@dataclass(frozen=True)
class StationStreamSpec:
    rate_mbps: float = 760.0
    message_size: int = 8192
    streams: int = 4
    transport: str = "udp_stream"
    duration: float = 10.0
    seed: int = 0
    impairment: ImpairmentSpec | None = None
    impaired_streams: frozenset | None = None  # None: every stream
    max_payload: int = 1408

    def __post_init__(self):
        if not self.rate_mbps > 0:
            raise ValueError("rate_mbps must be positive")
        if self.message_size < 1:
            raise ValueError("message_size must be at least 1")
        if self.streams < 1:
            raise ValueError("streams must be at least 1")
        if not self.duration > 0:
            raise ValueError("duration must be positive")
        t = Transport(self.transport)
        limit = UDP_MAX if t is Transport.UDP_STREAM else MAX_MESSAGE
        if self.message_size > limit:
            raise ValueError(f"{t.value} messages are limited to {limit} bytes")
        if t is Transport.UC_READ:
            raise ValueError("uc_read is a pull transport; station streams are pushed")

    @property
    def interval(self) -> float:
        """Seconds between messages of one stream."""
        return self.message_size * 8 / (self.rate_mbps * 1e6)

    @property
    def aggregate_gbps(self) -> float:
        return self.streams * self.rate_mbps / 1000

    def impairment_for(self, stream: int) -> ImpairmentSpec | None:
        if self.impairment is None:
            return None
        if self.impaired_streams is not None and stream not in self.impaired_streams:
            return None
        return self.impairment.derive(stream)

    def options(self, stream: int) -> TransportOptions:
        return TransportOptions(message_size=self.message_size, max_payload=self.max_payload,
                                impairment=self.impairment_for(stream))


def stream_pattern(seed: int, stream: int, message_size: int) -> bytes:
    rng = random.Random(seed * 1_000_003 + stream)
    return rng.randbytes(max(message_size - SEQ_BYTES, 0) + PATTERN_SPAN)


def _pattern_offset(seq: int) -> int:
    return (seq * 8) % PATTERN_SPAN


def make_filler(pattern: bytes, message_size: int):
    """Return ``fill(view, seq)`` writing message ``seq`` of a stream in place."""
    head = min(SEQ_BYTES, message_size)
    body = message_size - head
    pv = memoryview(pattern)
    mask = (1 << (8 * head)) - 1

    def fill(view, seq):
        view[:head] = (seq & mask).to_bytes(head, "little")
        if body:
            k = _pattern_offset(seq)
            view[head:] = pv[k:k + body]

    return fill


class StreamAccount:
    """Receiver-side bookkeeping for one stream: exact loss, duplicates and corruption."""

    def __init__(self, pattern: bytes, message_size: int, verify: bool = True):
        self.pattern = pattern
        self.head = min(SEQ_BYTES, message_size)
        self.verify = verify and message_size > SEQ_BYTES
        self.seen = bytearray()
        self.unique = 0
        self.duplicates = 0
        self.corrupt = 0
        self.max_seq = -1

    def on_message(self, view) -> None:
        seq = int.from_bytes(view[:self.head], "little")
        if self.verify and not self.pattern.startswith(view[SEQ_BYTES:], _pattern_offset(seq)):
            self.corrupt += 1
            return
        byte, bit = seq >> 3, 1 << (seq & 7)
        seen = self.seen
        if byte >= len(seen):
            seen.extend(bytes(max(byte + 1 - len(seen), len(seen))))
        if seen[byte] & bit:
            self.duplicates += 1
            return
        seen[byte] |= bit
        self.unique += 1
        if seq > self.max_seq:
            self.max_seq = seq

    def missing(self, sent: int | None = None) -> int:
        """Messages never delivered; without ``sent``, tail loss is invisible."""
        expected = self.max_seq + 1 if sent is None else sent
        return expected - self.unique

    def summary(self) -> dict:
        return {"unique": self.unique, "duplicates": self.duplicates, "corrupt": self.corrupt,
                "max_seq": self.max_seq}


@dataclass
class StreamReport:
    stream: int
    sent: int = 0
    delivered: int = 0
    duplicates: int = 0
    corrupt: int = 0
    injected_drops: int | None = None
    elapsed: float = 0.0
    offered_mbps: float = 0.0
    delivered_mbps: float = 0.0
    loss_fraction: float = 0.0
    error: str | None = None


@dataclass
class GenerateReport:
    spec: dict
    streams: list[StreamReport] = field(default_factory=list)

    @property
    def offered_gbps(self) -> float:
        return sum(s.offered_mbps for s in self.streams) / 1000

    @property
    def delivered_gbps(self) -> float:
        return sum(s.delivered_mbps for s in self.streams) / 1000

    @property
    def lost(self) -> int:
        return sum(s.sent - s.delivered for s in self.streams if s.error is None)

    def to_dict(self) -> dict:
        return {"spec": self.spec, "offered_gbps": self.offered_gbps,
                "delivered_gbps": self.delivered_gbps, "lost": self.lost,
                "streams": [asdict(s) for s in self.streams]}


# ----------------------------------------------------------------- sending


@dataclass
class SendResult:
    stream: int
    sent: int = 0
    elapsed: float = 0.0
    injected_drops: int | None = None
    error: str | None = None


def _pace_stream(spec: StationStreamSpec, stream: int, peer, out: list, start: threading.Barrier) -> None:
    res = SendResult(stream)
    out[stream] = res
    try:
        sender = make_sender(spec.transport, peer, spec.options(stream))
    except (TransportError, OSError) as exc:
        res.error = str(exc)
        log.warning("stream %d: %s", stream, exc)
        _barrier_wait(start)
        return
    fill = make_filler(stream_pattern(spec.seed, stream, spec.message_size), spec.message_size)
    bucket = TokenBucket.for_bits(spec.rate_mbps * 1e6, spec.message_size)
    _barrier_wait(start)
    try:
        bucket.reset()
        t0 = time.monotonic()
        deadline = t0 + spec.duration
        n = 0
        while time.monotonic() < deadline:
            bucket.acquire()
            sender.send(fill)
            n += 1
        res.elapsed = time.monotonic() - t0
        res.sent = n
        sender.flush()
    except (TransportError, OSError) as exc:
        res.error = str(exc)
        res.sent = sender.seq
        res.elapsed = time.monotonic() - t0
    finally:
        imp = getattr(sender, "_impair", None) or getattr(getattr(sender, "ep", None), "_impair", None)
        if imp is not None:
            res.injected_drops = imp.stats.dropped
        sender.close()


def _barrier_wait(barrier: threading.Barrier) -> None:
    try:
        barrier.wait(timeout=30)
    except threading.BrokenBarrierError:
        pass


def send_streams(spec: StationStreamSpec, peers: list) -> list[SendResult]:
    """Pace every stream at ``spec.rate_mbps`` towards its peer; streams start together."""
    if len(peers) != spec.streams:
        raise ValueError(f"need {spec.streams} peer addresses, got {len(peers)}")
    out: list = [None] * spec.streams
    start = threading.Barrier(spec.streams)
    threads = [threading.Thread(target=_pace_stream, args=(spec, i, peers[i], out, start),
                                name=f"lofar-stream-{i}", daemon=True) for i in range(spec.streams)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    return out


# --------------------------------------------------------------- receiving


class StationReceiver:
    """One receiver endpoint per stream, serviced together on the calling thread."""

    def __init__(self, spec: StationStreamSpec, binds: list, verify: bool = True):
        self.spec = spec
        self.accounts = []
        self.receivers = []
        try:
            for i, bind in enumerate(binds):
                acct = StreamAccount(stream_pattern(spec.seed, i, spec.message_size), spec.message_size, verify)
                opts = TransportOptions(message_size=spec.message_size, max_payload=spec.max_payload)
                self.receivers.append(make_receiver(spec.transport, bind, opts, acct.on_message))
                self.accounts.append(acct)
        except BaseException:
            self.close()
            raise

    @property
    def addresses(self) -> list:
        return [r.address for r in self.receivers]

    def run(self, stop) -> None:
        run_receivers(self.receivers, stop)

    def summaries(self) -> list[dict]:
        return [a.summary() for a in self.accounts]

    def close(self) -> None:
        for r in self.receivers:
            r.close()


def _receiver_process(spec: StationStreamSpec, binds: list, conn) -> None:
    try:
        rx = StationReceiver(spec, binds)
    except Exception as exc:  # reported to the parent rather than lost in the child
        conn.send(("error", str(exc)))
        return
    conn.send(("ready", rx.addresses))
    rx.run(conn.poll)
    conn.recv()
    conn.send(("done", rx.summaries()))
    rx.close()


def build_report(spec: StationStreamSpec, sent: list[SendResult], received: list[dict]) -> GenerateReport:
    report = GenerateReport(spec=_spec_dict(spec))
    size_bits = spec.message_size * 8
    for s, r in zip(sent, received):
        rep = StreamReport(s.stream, sent=s.sent, delivered=r["unique"], duplicates=r["duplicates"],
                           corrupt=r["corrupt"], injected_drops=s.injected_drops, elapsed=s.elapsed,
                           error=s.error)
        if s.elapsed > 0:
            rep.offered_mbps = s.sent * size_bits / s.elapsed / 1e6
            rep.delivered_mbps = rep.delivered * size_bits / s.elapsed / 1e6
        if s.sent:
            rep.loss_fraction = (s.sent - rep.delivered) / s.sent
        report.streams.append(rep)
    return report


def generate(spec: StationStreamSpec, host: str = "127.0.0.1") -> GenerateReport:
    """Run sender and receiver on this host, the receiver in a child process."""
    ctx = mp.get_context("fork")
    parent, child = ctx.Pipe()
    proc = ctx.Process(target=_receiver_process, args=(spec, [(host, 0)] * spec.streams, child), daemon=True)
    proc.start()
    try:
        kind, payload = parent.recv()
        if kind == "error":
            raise TransportError(f"receiver failed to start: {payload}")
        sent = send_streams(spec, payload)
        time.sleep(DRAIN_GRACE)
        parent.send("stop")
        _, received = parent.recv()
    finally:
        proc.join(timeout=5)
        if proc.is_alive():
            proc.kill()
    return build_report(spec, sent, received)


def _spec_dict(spec: StationStreamSpec) -> dict:
    d = asdict(spec)
    d["impaired_streams"] = sorted(spec.impaired_streams) if spec.impaired_streams is not None else None
    return d


# --------------------------------------------------------------------- CLI


def _consecutive(addr, n: int) -> list:
    host, port = addr
    return [(host, port + i) for i in range(n)]


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lofargen", description="Paced station-style stream generator")
    p.add_argument("--role", choices=["send", "recv", "loopback"], default="loopback")
    p.add_argument("--streams", type=int, default=4)
    p.add_argument("--rate-mbps", type=float, default=760.0)
    p.add_argument("--msg-size", type=int, default=8192)
    p.add_argument("--transport", choices=[t.value for t in Transport if t is not Transport.UC_READ],
                   default="udp_stream")
    p.add_argument("--peer", type=parse_addr, default=("127.0.0.1", 47000),
                   help="receiver address of stream 0; stream i uses port + i")
    p.add_argument("--duration", type=float, default=10.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--loss", type=float, default=0.0, help="sender-side injected loss probability")
    p.add_argument("--max-payload", type=int, default=1408)
    p.add_argument("--csv", help="append per-stream rows to this file")
    p.add_argument("--json", action="store_true", help="print the report as JSON")
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(message)s")
    try:
        imp = ImpairmentSpec(loss_prob=args.loss, seed=args.seed) if args.loss else None
        spec = StationStreamSpec(args.rate_mbps, args.msg_size, args.streams, args.transport,
                                 args.duration, args.seed, imp, max_payload=args.max_payload)
    except ValueError as exc:
        _parser().error(str(exc))
    peers = _consecutive(args.peer, spec.streams)

    if args.role == "recv":
        rx = StationReceiver(spec, peers)
        print(f"receiving {spec.streams} streams on {peers[0][0]}:{peers[0][1]}..{peers[-1][1]}", flush=True)
        deadline = time.monotonic() + spec.duration + DRAIN_GRACE
        try:
            rx.run(lambda: time.monotonic() >= deadline)
        except KeyboardInterrupt:
            pass
        rows = [{"stream": i, **s, "missing": rx.accounts[i].missing()} for i, s in enumerate(rx.summaries())]
        rx.close()
        for row in rows:
            print(json.dumps(row) if args.json else
                  f"stream {row['stream']}: delivered {row['unique']} missing {row['missing']} "
                  f"dup {row['duplicates']} corrupt {row['corrupt']}")
        if args.csv:
            write_csv(args.csv, rows, append=True)
        return 0

    if args.role == "send":
        results = send_streams(spec, peers)
        rows = []
        for r in results:
            mbps = r.sent * spec.message_size * 8 / r.elapsed / 1e6 if r.elapsed else 0.0
            rows.append({"stream": r.stream, "sent": r.sent, "offered_mbps": round(mbps, 3),
                         "injected_drops": r.injected_drops, "error": r.error})
        for row in rows:
            print(json.dumps(row))
        if args.csv:
            write_csv(args.csv, rows, append=True)
        return 0 if all(r.error is None for r in results) else 1

    report = generate(spec)
    if args.json:
        print(json.dumps(report.to_dict(), indent=2))
    else:
        for s in report.streams:
            print(f"stream {s.stream}: offered {s.offered_mbps:.1f} Mb/s delivered {s.delivered_mbps:.1f} Mb/s "
                  f"loss {s.loss_fraction:.4%}" + (f" error {s.error}" if s.error else ""))
        print(f"aggregate: offered {report.offered_gbps:.3f} Gb/s delivered {report.delivered_gbps:.3f} Gb/s")
    if args.csv:
        write_csv(args.csv, [asdict(s) for s in report.streams], append=True)
    return 0


if __name__ == "__main__":
    sys.exit(main())
