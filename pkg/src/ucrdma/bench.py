"""Netperf-style throughput benchmark over UC transports and kernel socket baselines.

Modes:

* ``--role server``: receive on ``--peer`` until the senders go away, then
  print a report.
* ``--role client``: send to ``--peer`` for ``--duration`` seconds.
* ``--role loopback`` (default when no peer is given): run both on this
  host, the receiver in a child process so its CPU time is measured alone.

Goodput counts only messages delivered complete. The resource term of the
efficiency is the receiver's CPU-seconds per second unless ``--watts``
supplies an externally measured power figure.
"""

from __future__ import annotations

import argparse
import json
import logging
import multiprocessing as mp
import sys
import threading
import time
from dataclasses import asdict, dataclass, field

from .impair import ImpairmentSpec, TunReflector, parse_addr
from .metrics import CpuMeter, compute_efficiency, gbps, write_csv
from .transports import (
    TokenBucket, Transport, TransportError, TransportOptions, make_receiver, make_sender, run_receivers,
)

log = logging.getLogger(__name__)

ROLES = ("client", "server", "loopback")
DRAIN = 0.1


@dataclass
class BenchConfig:
    role: str = "loopback"
    transport: Transport = Transport.UC_WRITE
    message_size: int = 8192
    duration: float = 5.0
    peer: tuple | None = None
    impairment: ImpairmentSpec | None = None
    watts_override: float | None = None
    rate_mbps: float | None = None  # offered load per stream; None saturates
    streams: int = 1
    max_payload: int = 1408
    read_timeout: float | None = None
    window: int = 32
    # loopback only: route traffic through a TUN reflector (needed to impair TCP)
    via_tun: bool = False
    link_delay: float = 0.0
    tcp_congestion: str | None = "cubic"

    def __post_init__(self):
        self.transport = Transport(self.transport)
        if self.role not in ROLES:
            raise ValueError(f"role must be one of {ROLES}")
        if self.role != "loopback" and self.peer is None:
            raise ValueError(f"{self.role} role needs a peer address")
        if self.duration <= 0:
            raise ValueError("duration must be positive")
        if self.streams < 1:
            raise ValueError("streams must be >= 1")
        if self.rate_mbps is not None and self.rate_mbps <= 0:
            raise ValueError("rate must be positive")
        if self.watts_override is not None and self.watts_override <= 0:
            raise ValueError("watts must be positive")
        if self.link_delay and not self.via_tun:
            raise ValueError("link delay needs the TUN path")
        self.options().validate(self.transport)

    def options(self, impaired: bool = True) -> TransportOptions:
        return TransportOptions(self.message_size, self.max_payload,
                                self.impairment if impaired else None, self.read_timeout, self.window,
                                tcp_congestion=self.tcp_congestion)


@dataclass
class SideReport:
    messages: int = 0
    bytes: int = 0
    seconds: float = 0.0
    cpu: float = 0.0  # CPU-seconds per second over the window

    @property
    def gbps(self) -> float:
        return gbps(self.bytes, self.seconds)


@dataclass
class BenchResult:
    transport: str
    message_size: int
    streams: int
    loss: float
    offered_gbps: float
    goodput_gbps: float
    delivered_ratio: float
    sender_cpu: float
    receiver_cpu: float
    resource: float
    resource_kind: str
    efficiency: float
    messages_sent: int
    messages_delivered: int
    counters: dict = field(default_factory=dict)

    def row(self) -> dict:
        d = asdict(self)
        d.pop("counters")
        return d


# ------------------------------------------------------------------ server


class _Server:
    """Receiver loop on a background thread plus window snapshots."""

    def __init__(self, cfg: BenchConfig, bind):
        self.cfg = cfg
        self.receiver = make_receiver(cfg.transport, bind, cfg.options(impaired=False))
        self._stop = False
        self._thread = threading.Thread(target=run_receivers,
                                        args=([self.receiver], lambda: self._stop), daemon=True)
        self.meter = CpuMeter()
        self._mark = None

    @property
    def address(self) -> tuple:
        return self.receiver.address

    def start(self) -> _Server:
        self._thread.start()
        return self

    def mark(self) -> None:
        self.meter.start()
        self._mark = (time.monotonic(), *self.receiver.delivered())

    def report(self) -> SideReport:
        cpu = self.meter.read()
        t0, m0, b0 = self._mark
        m1, b1 = self.receiver.delivered()
        return SideReport(m1 - m0, b1 - b0, time.monotonic() - t0, cpu)

    def counters(self) -> dict:
        ep = getattr(self.receiver, "ep", None)
        return ep.counters.snapshot() if ep is not None else {}

    def stop(self) -> None:
        self._stop = True
        self._thread.join()
        self.receiver.close()


def _server_process(cfg: BenchConfig, bind, pipe) -> None:
    """Child process body: serve, answering ``mark``/``report``/``stop`` commands over ``pipe``."""
    try:
        server = _Server(cfg, bind).start()
    except Exception as exc:  # report setup failures to the parent
        pipe.send(("error", repr(exc)))
        return
    pipe.send(("ready", server.address))
    while True:
        cmd = pipe.recv()
        if cmd == "mark":
            server.mark()
            pipe.send(("ok", None))
        elif cmd == "report":
            pipe.send(("ok", (asdict(server.report()), server.counters())))
        else:
            server.stop()
            pipe.send(("ok", None))
            return


def serve(cfg: BenchConfig, idle_timeout: float = 2.0, out=sys.stdout) -> SideReport:
    """Standalone server: stops once every stream has closed or nothing arrived
    for ``idle_timeout``, and reports over the first-to-last message window."""
    server = _Server(cfg, cfg.peer).start()
    rx = server.receiver
    try:
        while rx.stats.first_rx is None:
            time.sleep(0.01)
        meter = CpuMeter()
        while True:
            time.sleep(0.05)
            st = rx.stats
            idle = time.monotonic() - (st.last_rx or 0) > idle_timeout
            closed = st.streams_opened and st.streams_closed >= st.streams_opened
            if idle or closed:
                break
        cpu_seconds = meter.cpu_seconds()
        window = max(st.last_rx - st.first_rx, 1e-6)
        messages, nbytes = rx.delivered()
        rep = SideReport(messages, nbytes, window, cpu_seconds / window)
    finally:
        server.stop()
    resource = cfg.watts_override or rep.cpu
    record = {"role": "server", "transport": cfg.transport.value, "message_size": cfg.message_size,
              "goodput_gbps": rep.gbps, "messages": rep.messages, "receiver_cpu": rep.cpu}
    if resource > 0:
        eff = compute_efficiency(rep.gbps, resource, "watts" if cfg.watts_override else "cpu_seconds_per_second")
        record["efficiency"] = eff.efficiency
    print(json.dumps(record, sort_keys=True), file=out)
    return rep


# ------------------------------------------------------------------ client


def _drive(sender, cfg: BenchConfig, stop_at: float, fill=None) -> None:
    bucket = None
    if cfg.rate_mbps is not None:
        bucket = TokenBucket.for_bits(cfg.rate_mbps * 1e6, cfg.message_size)
    send = sender.send
    clock = time.monotonic
    n = 0
    while True:
        if (n & 15) == 0 and clock() >= stop_at:
            break
        if bucket is not None:
            bucket.acquire()
        send(fill)
        n += 1
    sender.flush()


def run_client(cfg: BenchConfig, peer, before_start=None) -> tuple[SideReport, list]:
    """Open ``cfg.streams`` senders, then drive them for ``cfg.duration`` seconds.

    Returns the sender-side report and the senders (still open) for inspection.
    """
    opts = cfg.options()
    senders = []
    for i in range(cfg.streams):
        if opts.impairment is not None and i:
            opts = TransportOptions(**{**asdict(opts), "impairment": cfg.impairment.derive(i + 1)})
        senders.append(make_sender(cfg.transport, peer, opts))
    if before_start is not None:
        before_start()
    meter = CpuMeter()
    t0 = time.monotonic()
    stop_at = t0 + cfg.duration
    errors: list[BaseException] = []
    if len(senders) == 1:
        _drive(senders[0], cfg, stop_at)
    else:
        def worker(s):
            try:
                _drive(s, cfg, stop_at)
            except BaseException as exc:  # noqa: BLE001 - reported after join
                errors.append(exc)

        threads = [threading.Thread(target=worker, args=(s,)) for s in senders]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
    elapsed = time.monotonic() - t0
    cpu = meter.read()
    if errors:
        raise errors[0]
    sent = sum(s.seq for s in senders)
    return SideReport(sent, sum(s.sent_bytes for s in senders), elapsed, cpu), senders


def run_bench(cfg: BenchConfig) -> BenchResult:
    """Run one benchmark. In loopback mode both ends run here; otherwise this is the client."""
    if cfg.role == "server":
        rep = serve(cfg)
        return _result(cfg, SideReport(), rep, {})
    if cfg.role == "client":
        tx, senders = run_client(cfg, cfg.peer)
        rx = SideReport(*_pulled(senders), tx.seconds, tx.cpu) if cfg.transport is Transport.UC_READ else SideReport()
        for s in senders:
            s.close()
        return _result(cfg, tx, rx, {})
    return _run_loopback(cfg)


def _pulled(senders) -> tuple[int, int]:
    m = b = 0
    for s in senders:
        dm, db = s.delivered()
        m += dm
        b += db
    return m, b


def _run_loopback(cfg: BenchConfig) -> BenchResult:
    tun = None
    host = "127.0.0.1"
    asked = cfg
    if cfg.via_tun:
        spec = cfg.impairment or ImpairmentSpec()
        tun = TunReflector(spec, delay=cfg.link_delay).start()
        host = tun.local_ip
        # the reflector does the impairing; the endpoints run clean
        cfg = BenchConfig(**{**asdict(cfg), "impairment": None, "transport": cfg.transport})
    ctx = mp.get_context("fork")
    parent, child = ctx.Pipe()
    proc = ctx.Process(target=_server_process, args=(cfg, (host, 0), child), daemon=True)
    proc.start()

    def call(cmd, timeout=30.0):
        parent.send(cmd)
        if not parent.poll(timeout):
            raise TransportError(f"receiver did not answer {cmd!r}")
        status, value = parent.recv()
        if status != "ok":
            raise TransportError(f"receiver failed: {value}")
        return value

    senders = []
    try:
        if not parent.poll(30):
            raise TransportError("receiver did not start")
        status, addr = parent.recv()
        if status != "ready":
            raise TransportError(f"receiver failed: {addr}")
        peer = (tun.peer_ip, addr[1]) if tun is not None else tuple(addr)
        tx, senders = run_client(cfg, peer, before_start=lambda: call("mark"))
        time.sleep(DRAIN)
        rx_dict, counters = call("report")
        rx = SideReport(**rx_dict)
        if cfg.transport is Transport.UC_READ:
            # data flows towards the initiator: it is the receiving side
            m, b = _pulled(senders)
            rx = SideReport(m, b, tx.seconds, tx.cpu)
            counters = senders[0].ep.counters.snapshot()
        return _result(asked, tx, rx, counters)
    finally:
        for s in senders:
            try:
                s.close()
            except Exception:  # noqa: BLE001 - best-effort teardown
                pass
        try:
            call("stop", timeout=5)
        except Exception:  # noqa: BLE001
            pass
        proc.join(5)
        if proc.is_alive():
            proc.kill()
        if tun is not None:
            tun.stop()


def _result(cfg: BenchConfig, tx: SideReport, rx: SideReport, counters: dict) -> BenchResult:
    offered = gbps(tx.bytes, tx.seconds)
    # goodput over the sender's window: the drain period only collects stragglers
    goodput = gbps(rx.bytes, tx.seconds) if tx.seconds else rx.gbps
    if cfg.watts_override is not None:
        resource, kind = cfg.watts_override, "watts"
    else:
        resource, kind = rx.cpu, "cpu_seconds_per_second"
    eff = compute_efficiency(goodput, resource, kind).efficiency if resource > 0 else 0.0
    loss = cfg.impairment.loss_prob if cfg.impairment is not None else 0.0
    return BenchResult(cfg.transport.value, cfg.message_size, cfg.streams, loss, offered, goodput,
                       rx.messages / tx.messages if tx.messages else 0.0, tx.cpu, rx.cpu, resource,
                       kind, eff, tx.messages, rx.messages, counters)


def run_sweep(sizes, transports, losses=(0.0,), repetitions: int = 1, base: BenchConfig | None = None,
              seed: int = 0) -> list[dict]:
    """Full-factorial loopback sweep, one row per (transport, size, loss, repetition).

    A failing cell is recorded with its error and the sweep continues.
    """
    base = base or BenchConfig()
    rows = []
    for transport in transports:
        for size in sizes:
            for loss in losses:
                for rep in range(repetitions):
                    row = {"transport": Transport(transport).value, "message_size": size, "loss": loss,
                           "repetition": rep, "error": ""}
                    try:
                        spec = ImpairmentSpec(loss_prob=loss, seed=seed + rep) if loss else None
                        cfg = BenchConfig(**{**asdict(base), "role": "loopback", "transport": transport,
                                             "message_size": size, "impairment": spec})
                        row.update(run_bench(cfg).row())
                    except Exception as exc:  # noqa: BLE001 - keep sweeping
                        row["error"] = f"{type(exc).__name__}: {exc}"
                    rows.append(row)
    return rows


SWEEP_COLUMNS = ["transport", "message_size", "loss", "repetition", "offered_gbps", "goodput_gbps",
                 "delivered_ratio", "sender_cpu", "receiver_cpu", "resource", "resource_kind",
                 "efficiency", "messages_sent", "messages_delivered", "error"]


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="bench", description=__doc__.split("\n\n")[0])
    ap.add_argument("--role", choices=ROLES, default=None)
    ap.add_argument("--transport", choices=[t.value for t in Transport], default="uc_write")
    ap.add_argument("--msg-size", type=int, default=8192)
    ap.add_argument("--duration", type=float, default=5.0)
    ap.add_argument("--peer", type=parse_addr, default=None)
    ap.add_argument("--loss", type=float, default=0.0)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--streams", type=int, default=1)
    ap.add_argument("--watts", type=float, default=None)
    ap.add_argument("--rate-mbps", type=float, default=None, help="paced offered load per stream")
    ap.add_argument("--max-payload", type=int, default=1408)
    ap.add_argument("--read-timeout", type=float, default=None)
    ap.add_argument("--tcp-cc", default="cubic",
                    help="congestion control for tcp_stream ('default' keeps the kernel's choice)")
    ap.add_argument("--tun", action="store_true",
                    help="loopback only: route through a TUN reflector (implied for tcp_stream with --loss)")
    ap.add_argument("--link-delay", type=float, default=0.0, help="one-way delay in seconds on the TUN path")
    ap.add_argument("--csv", default=None, help="append the result row to this CSV file")
    ap.add_argument("--json", action="store_true", help="print a JSON record instead of text")
    args = ap.parse_args(argv)
    role = args.role or ("client" if args.peer else "loopback")
    spec = ImpairmentSpec(loss_prob=args.loss, seed=args.seed) if args.loss else None
    via_tun = args.tun or bool(args.link_delay) or (args.transport == "tcp_stream" and spec is not None)
    try:
        cfg = BenchConfig(role, args.transport, args.msg_size, args.duration, args.peer, spec, args.watts,
                          args.rate_mbps, args.streams, args.max_payload, args.read_timeout,
                          via_tun=via_tun and role == "loopback", link_delay=args.link_delay,
                          tcp_congestion=None if args.tcp_cc == "default" else args.tcp_cc)
    except ValueError as exc:
        ap.error(str(exc))
    logging.basicConfig(level=logging.WARNING)
    try:
        if role == "server":
            serve(cfg)
            return 0
        result = run_bench(cfg)
    except (OSError, TransportError) as exc:
        print(f"bench: {exc}", file=sys.stderr)
        return 1
    if args.csv:
        write_csv(args.csv, [result.row()], append=True)
    if args.json:
        rec = result.row()
        rec["counters"] = result.counters
        print(json.dumps(rec, sort_keys=True))
    elif role == "client" and cfg.transport is not Transport.UC_READ:
        print(f"{result.transport} {result.message_size} B x{result.streams}: "
              f"offered {result.offered_gbps:.3f} Gb/s ({result.messages_sent} messages), "
              f"sender cpu {result.sender_cpu:.3f}; goodput is reported by the server")
    else:
        print(f"{result.transport} {result.message_size} B x{result.streams}: "
              f"offered {result.offered_gbps:.3f} Gb/s, goodput {result.goodput_gbps:.3f} Gb/s "
              f"({result.delivered_ratio:.3f} delivered), receiver cpu {result.receiver_cpu:.3f}, "
              f"E {result.efficiency:.3f} Gb/s per {'W' if result.resource_kind == 'watts' else 'cpu'}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
