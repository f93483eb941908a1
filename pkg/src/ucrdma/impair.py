"""Seeded link impairment: independent loss, duplication and bounded reordering.

The same filter runs in-process (on an endpoint's transmit path), inside a
UDP forwarding proxy, or inside a TUN packet reflector that puts TCP through
the same loss process.
"""

from __future__ import annotations

import argparse
import fcntl
import logging
import os
import random
import select
import socket
import struct
import sys
import threading
import time
from collections import deque
from dataclasses import dataclass, field

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ImpairmentSpec:
    loss_prob: float = 0.0
    dup_prob: float = 0.0
    reorder_prob: float = 0.0
    reorder_depth: int = 1
    seed: int = 0

    def __post_init__(self):
        for name in ("loss_prob", "dup_prob", "reorder_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {p}")
        if self.reorder_prob > 0 and self.reorder_depth < 1:
            raise ValueError("reorder_depth must be >= 1 when reordering")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")

    def derive(self, k: int) -> ImpairmentSpec:
        """Same spec with an independent seed (e.g. for the reverse direction)."""
        return ImpairmentSpec(self.loss_prob, self.dup_prob, self.reorder_prob,
                              self.reorder_depth, (self.seed + 0x9E3779B97F4A7C15 * k) % 2**64)


@dataclass
class ImpairStats:
    seen: int = 0
    dropped: int = 0
    duplicated: int = 0
    reordered: int = 0
    emitted: int = 0


class Impairment:
    """Stateful filter over a stream of opaque datagrams.

    Each input slot draws, in order: a loss decision, then (if kept) a
    duplication decision, then per copy a reorder decision. A reordered copy
    is emitted after ``k`` further input slots, ``k`` uniform in
    ``[1, reorder_depth]``. Identical seeds give identical output.
    """

    def __init__(self, spec: ImpairmentSpec):
        self.spec = spec
        self.stats = ImpairStats()
        self._rng = random.Random(spec.seed)
        self._held: list[list] = []

    @property
    def holds(self) -> bool:
        return self.spec.reorder_prob > 0

    def feed(self, item) -> list:
        spec = self.spec
        rng = self._rng
        st = self.stats
        st.seen += 1
        out = []
        aged = self._held
        self._held = []
        if spec.loss_prob and rng.random() < spec.loss_prob:
            st.dropped += 1
        else:
            copies = 1
            if spec.dup_prob and rng.random() < spec.dup_prob:
                copies = 2
                st.duplicated += 1
            for _ in range(copies):
                if spec.reorder_prob and rng.random() < spec.reorder_prob:
                    self._held.append([rng.randint(1, spec.reorder_depth), item])
                    st.reordered += 1
                else:
                    out.append(item)
        for entry in aged:
            entry[0] -= 1
            if entry[0] <= 0:
                out.append(entry[1])
            else:
                self._held.append(entry)
        st.emitted += len(out)
        return out

    def flush(self) -> list:
        """Release every held datagram (end of stream or idle link)."""
        out = [entry[1] for entry in sorted(self._held, key=lambda e: e[0])]
        self._held = []
        self.stats.emitted += len(out)
        return out


def filter(spec: ImpairmentSpec, stream):  # noqa: A001 - mirrors the operation name
    """Apply ``spec`` to an iterable of datagrams, yielding the impaired stream."""
    imp = Impairment(spec)
    for item in stream:
        yield from imp.feed(item)
    yield from imp.flush()


def parse_addr(text: str) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    if not host or not port:
        raise argparse.ArgumentTypeError(f"expected host:port, got {text!r}")
    return host.strip("[]"), int(port)


class UdpProxy:
    """Bidirectional UDP forwarder with an independent impairment per direction.

    The first sender seen on ``listen_addr`` becomes the client; everything
    it sends goes to ``forward_addr`` from a second socket, and replies are
    relayed back to it.
    """

    def __init__(self, listen_addr, forward_addr, spec: ImpairmentSpec,
                 delay: float = 0.0, rcvbuf: int = 4 << 20):
        self.forward_addr = socket.getaddrinfo(*forward_addr, type=socket.SOCK_DGRAM)[0][4][:2]
        family = socket.getaddrinfo(*listen_addr, type=socket.SOCK_DGRAM)[0][0]
        self.front = socket.socket(family, socket.SOCK_DGRAM)
        self.front.bind(listen_addr)
        self.back = socket.socket(family, socket.SOCK_DGRAM)
        self.back.bind((listen_addr[0], 0))
        for s in (self.front, self.back):
            for opt in (33, 32):  # SO_RCVBUFFORCE, SO_SNDBUFFORCE
                try:
                    s.setsockopt(socket.SOL_SOCKET, opt, rcvbuf)
                except OSError:
                    pass
        self.client = None
        self.forward = Impairment(spec)
        self.reverse = Impairment(spec.derive(1))
        self.delay = delay
        self._stop = threading.Event()
        self._threads: list[threading.Thread] = []

    @property
    def address(self) -> tuple:
        return self.front.getsockname()[:2]

    def start(self) -> UdpProxy:
        for name, args in (("fwd", (self.front, self.back, self.forward, True)),
                           ("rev", (self.back, self.front, self.reverse, False))):
            t = threading.Thread(target=self._pump, args=args, name=f"proxy-{name}", daemon=True)
            t.start()
            self._threads.append(t)
        return self

    def _pump(self, src: socket.socket, dst: socket.socket, imp: Impairment, forward: bool) -> None:
        buf = bytearray(65536)
        src.settimeout(0.01)
        while not self._stop.is_set():
            try:
                n, addr = src.recvfrom_into(buf)
            except socket.timeout:
                out = imp.flush()
            except OSError:
                return
            else:
                if forward:
                    self.client = addr
                elif addr[:2] != self.forward_addr:
                    continue
                out = imp.feed(bytes(buf[:n]))
            to = self.forward_addr if forward else self.client
            if to is None:
                continue
            if self.delay:
                time.sleep(self.delay)
            for dg in out:
                try:
                    dst.sendto(dg, to)
                except OSError:
                    pass

    def stop(self) -> dict:
        self._stop.set()
        for t in self._threads:
            t.join()
        self.front.close()
        self.back.close()
        return self.stats()

    def stats(self) -> dict:
        return {"forward": vars(self.forward.stats).copy(), "reverse": vars(self.reverse.stats).copy()}

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()


def proxy_run(listen_addr, forward_addr, spec: ImpairmentSpec, stop: threading.Event | None = None) -> dict:
    """Forward until interrupted (or ``stop`` is set), then print and return statistics."""
    proxy = UdpProxy(listen_addr, forward_addr, spec).start()
    try:
        while not (stop is not None and stop.is_set()):
            time.sleep(0.1)
    except KeyboardInterrupt:
        pass
    stats = proxy.stop()
    for direction, st in stats.items():
        print(f"{direction}: " + " ".join(f"{k}={v}" for k, v in st.items()))
    return stats


# --- TUN reflector -----------------------------------------------------------

TUNSETIFF = 0x400454CA
IFF_TUN = 0x0001
IFF_NO_PI = 0x1000
SIOCSIFADDR = 0x8916
SIOCSIFNETMASK = 0x891C
SIOCGIFFLAGS = 0x8913
SIOCSIFFLAGS = 0x8914
SIOCSIFMTU = 0x8922
IFF_UP = 0x1
IFF_RUNNING = 0x40


def _sockaddr_in(ip: str) -> bytes:
    return struct.pack("HH4s8x", socket.AF_INET, 0, socket.inet_aton(ip))


@dataclass
class TunReflector:
    """Impaired loopback path through a TUN device, for TCP as well as UDP.

    Traffic sent to ``peer_ip`` enters the TUN device; the reflector swaps the
    IPv4 source and destination (which leaves every checksum valid) and
    writes the packet back, so it is delivered to ``local_ip``. A socket
    listening on ``local_ip`` and a client connecting to ``peer_ip`` thus talk
    through the filter. ``delay`` adds a fixed one-way propagation delay.
    Needs CAP_NET_ADMIN.
    """

    spec: ImpairmentSpec = field(default_factory=ImpairmentSpec)
    name: str = "ucimp0"
    local_ip: str = "10.77.0.1"
    peer_ip: str = "10.77.0.2"
    mtu: int = 1500
    delay: float = 0.0

    def __post_init__(self):
        self._fd = None
        self._stop = threading.Event()
        self._threads: list[threading.Thread] = []
        self._queue: deque = deque()
        self._cv = threading.Condition()
        self.filter = Impairment(self.spec)

    @staticmethod
    def available() -> bool:
        if not os.path.exists("/dev/net/tun"):
            return False
        try:
            fd = os.open("/dev/net/tun", os.O_RDWR)
        except OSError:
            return False
        try:
            fcntl.ioctl(fd, TUNSETIFF, struct.pack("16sH", b"ucprobe0", IFF_TUN | IFF_NO_PI))
        except OSError:
            return False
        finally:
            os.close(fd)
        return True

    def start(self) -> TunReflector:
        fd = os.open("/dev/net/tun", os.O_RDWR)
        ifname = self.name.encode()
        fcntl.ioctl(fd, TUNSETIFF, struct.pack("16sH", ifname, IFF_TUN | IFF_NO_PI))
        with socket.socket(socket.AF_INET, socket.SOCK_DGRAM) as s:
            fcntl.ioctl(s, SIOCSIFADDR, struct.pack("16s", ifname) + _sockaddr_in(self.local_ip))
            fcntl.ioctl(s, SIOCSIFNETMASK, struct.pack("16s", ifname) + _sockaddr_in("255.255.255.0"))
            fcntl.ioctl(s, SIOCSIFMTU, struct.pack("16sI", ifname, self.mtu))
            flags = struct.unpack("16sH", fcntl.ioctl(s, SIOCGIFFLAGS, struct.pack("16sH", ifname, 0)))[1]
            fcntl.ioctl(s, SIOCSIFFLAGS, struct.pack("16sH", ifname, flags | IFF_UP | IFF_RUNNING))
        self._fd = fd
        t = threading.Thread(target=self._reflect, name="tun-reflect", daemon=True)
        t.start()
        self._threads.append(t)
        if self.delay:
            t = threading.Thread(target=self._release, name="tun-delay", daemon=True)
            t.start()
            self._threads.append(t)
        return self

    def _reflect(self) -> None:
        fd = self._fd
        while not self._stop.is_set():
            r, _, _ = select.select([fd], [], [], 0.05)
            if not r:
                continue
            try:
                pkt = bytearray(os.read(fd, 65536))
            except OSError:
                return
            if not pkt or pkt[0] >> 4 != 4:
                continue
            pkt[12:16], pkt[16:20] = pkt[16:20], pkt[12:16]
            for out in self.filter.feed(pkt):
                if self.delay:
                    with self._cv:
                        self._queue.append((time.monotonic() + self.delay, out))
                        self._cv.notify()
                else:
                    os.write(fd, out)

    def _release(self) -> None:
        q = self._queue
        while not self._stop.is_set():
            with self._cv:
                while not q and not self._stop.is_set():
                    self._cv.wait(0.05)
                if not q:
                    continue
                due, pkt = q[0]
            wait = due - time.monotonic()
            if wait > 0:
                time.sleep(wait)
            with self._cv:
                q.popleft()
            try:
                os.write(self._fd, pkt)
            except OSError:
                return

    def stop(self) -> dict:
        self._stop.set()
        with self._cv:
            self._cv.notify_all()
        for t in self._threads:
            t.join()
        if self._fd is not None:
            os.close(self._fd)
            self._fd = None
        return vars(self.filter.stats).copy()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="uc-impair", description="Impairing UDP forwarding proxy.")
    ap.add_argument("--listen", type=parse_addr, required=True, help="addr:port to accept datagrams on")
    ap.add_argument("--forward", type=parse_addr, required=True, help="addr:port to forward to")
    ap.add_argument("--loss", type=float, default=0.0)
    ap.add_argument("--dup", type=float, default=0.0)
    ap.add_argument("--reorder", type=float, default=0.0)
    ap.add_argument("--reorder-depth", type=int, default=1)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    try:
        spec = ImpairmentSpec(args.loss, args.dup, args.reorder, args.reorder_depth, args.seed)
    except ValueError as exc:
        ap.error(str(exc))
    logging.basicConfig(level=logging.INFO)
    try:
        proxy_run(args.listen, args.forward, spec)
    except OSError as exc:
        print(f"uc-impair: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
