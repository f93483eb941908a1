"""Fixed-size message transports shared by the benchmark and the traffic generator.

Every transport has a sender that emits application messages of one size
and a receiver that reports the messages arriving complete. The UC variants
run over :class:`~ucrdma.engine.Endpoint`; ``tcp_stream`` and ``udp_stream``
are plain kernel sockets used as baselines.
"""

from __future__ import annotations

import enum
import errno
import logging
import select
import socket
import struct
import time
from dataclasses import dataclass, field

from .engine import Endpoint, EndpointConfig
from .impair import Impairment, ImpairmentSpec
from .verbs import Access, QPState, WCStatus, WorkRequest, WROpcode

log = logging.getLogger(__name__)

UDP_MAX = 65507
MAX_MESSAGE = 2 << 20
# stag, slot size, slot count of the region a receiver exposes
ADVERT = struct.Struct("!III")
ADVERT_INTERVAL = 0.1
RING_BYTES = 16 << 20


class Transport(str, enum.Enum):
    UC_WRITE = "uc_write"
    UC_WRITE_IMM = "uc_write_imm"
    UC_SENDRECV = "uc_sendrecv"
    UC_READ = "uc_read"
    TCP_STREAM = "tcp_stream"
    UDP_STREAM = "udp_stream"

    @property
    def is_uc(self) -> bool:
        return self.value.startswith("uc_")

    @property
    def notifies(self) -> bool:
        """Whether the receiving application sees each message (and its content)."""
        return self is not Transport.UC_WRITE


class TransportError(RuntimeError):
    pass


@dataclass
class TransportOptions:
    message_size: int = 8192
    max_payload: int = 1408
    impairment: ImpairmentSpec | None = None
    read_timeout: float | None = None
    window: int = 32
    socket_buffer: int = 4 << 20
    connect_timeout: float = 5.0
    # loss-based congestion control for the TCP baseline; None keeps the kernel default
    tcp_congestion: str | None = "cubic"

    def validate(self, transport: Transport) -> None:
        if not 0 <= self.message_size <= MAX_MESSAGE:
            raise ValueError(f"message size must be in [0, {MAX_MESSAGE}]")
        if transport is Transport.UDP_STREAM and self.message_size > UDP_MAX:
            raise ValueError(f"udp_stream messages are limited to {UDP_MAX} bytes")
        if self.message_size == 0 and transport in (Transport.TCP_STREAM, Transport.UC_READ,
                                                    Transport.UDP_STREAM):
            raise ValueError(f"{transport.value} needs messages of at least one byte")
        if self.window < 1:
            raise ValueError("window must be >= 1")


def _slots(size: int) -> int:
    return max(1, min(256, RING_BYTES // max(size, 1)))


def _endpoint_config(transport: Transport, opts: TransportOptions) -> EndpointConfig:
    return EndpointConfig(max_payload=opts.max_payload, read_enabled=transport is Transport.UC_READ,
                          read_timeout=opts.read_timeout, socket_buffer=opts.socket_buffer,
                          max_outstanding_reads=min(opts.window, 64))


@dataclass
class ReceiverStats:
    messages: int = 0
    bytes: int = 0
    first_rx: float | None = None
    last_rx: float | None = None
    streams_closed: int = 0
    streams_opened: int = 0


# ---------------------------------------------------------------- receivers


class Receiver:
    """Base class: call :meth:`poll` until done; ``on_message(view)`` sees each complete message."""

    transport: Transport

    def __init__(self, opts: TransportOptions, on_message=None):
        self.opts = opts
        self.on_message = on_message
        self.stats = ReceiverStats()

    def fileno(self) -> int:
        raise NotImplementedError

    def poll(self) -> int:
        """Process whatever input is ready; return how many events were handled."""
        raise NotImplementedError

    def delivered(self) -> tuple[int, int]:
        """(messages, bytes) delivered complete so far."""
        return self.stats.messages, self.stats.bytes

    @property
    def address(self) -> tuple:
        raise NotImplementedError

    def close(self) -> None:
        raise NotImplementedError

    def _mark(self) -> None:
        now = time.monotonic()
        if self.stats.first_rx is None:
            self.stats.first_rx = now
        self.stats.last_rx = now


class UcReceiver(Receiver):
    """Passive side of a UC transport: exposes a slot ring (write), receive buffers
    (send/recv) or a readable source region (read), and advertises it to each peer."""

    RECV_BUFFERS = 64

    def __init__(self, transport: Transport, bind, opts: TransportOptions, on_message=None):
        super().__init__(opts, on_message)
        self.transport = transport
        self.ep = Endpoint(_endpoint_config(transport, opts), bind=bind)
        self.recv_cq = self.ep.create_cq(1 << 16)
        self.send_cq = self.ep.create_cq(1 << 12)
        self.listener = self.ep.listen(on_request=self._on_request, send_cq=self.send_cq,
                                       recv_cq=self.recv_cq)
        self._conns: dict[int, dict] = {}
        self._advert_due = 0.0
        self._advert_region = self.ep.register_memory(bytearray(ADVERT.size * 64))
        self._advert_next = 0

    @property
    def address(self) -> tuple:
        return self.ep.address

    def fileno(self) -> int:
        return self.ep.sock.fileno()

    def _on_request(self, qp) -> None:
        size = self.opts.message_size
        st = {"qp": qp}
        if self.transport is Transport.UC_SENDRECV:
            bufs = self.ep.register_memory(bytearray(max(size, 1) * self.RECV_BUFFERS))
            st["bufs"] = bufs
            for i in range(self.RECV_BUFFERS):
                qp.post_recv(WorkRequest.recv(i, bufs, i * max(size, 1), max(size, 1)))
        else:
            slots = _slots(size)
            access = Access.REMOTE_READ if self.transport is Transport.UC_READ else Access.REMOTE_WRITE
            buf = bytearray(max(size * slots, 1))
            if self.transport is Transport.UC_READ:
                buf[:] = bytes(range(256)) * (len(buf) // 256) + bytes(len(buf) % 256)
            st["ring"] = self.ep.register_memory(buf, access)
            st["slots"] = slots
        self._conns[qp.qp_id] = st
        self.stats.streams_opened += 1

    def _advertise(self, now: float) -> None:
        self._advert_due = now + ADVERT_INTERVAL
        for st in self._conns.values():
            qp = st["qp"]
            if "ring" not in st or qp.state is not QPState.CONNECTED:
                continue
            slot = self._advert_next
            self._advert_next = (slot + 1) % 64
            off = slot * ADVERT.size
            ADVERT.pack_into(self._advert_region.view, off, st["ring"].stag, self.opts.message_size,
                             st["slots"])
            try:
                qp.post_send(WorkRequest.send(0, self._advert_region, off, ADVERT.size))
            except Exception:  # CQ full or a state race: try again next round
                pass

    def poll(self) -> int:
        c = self.ep.counters
        before = c.datagrams_rx
        self.ep.progress()
        handled = c.datagrams_rx - before
        now = time.monotonic()
        housekeeping = now >= self._advert_due
        if housekeeping:
            while self.listener.accept(timeout=0) is not None:
                pass
            self._advertise(now)
            self.send_cq.poll(1 << 12)
        handled += self._consume()
        if housekeeping:
            # prune only after the CQ is drained: the last message of a
            # stream may complete in the same progress call as its DISCONNECT
            for qid, st in list(self._conns.items()):
                if st["qp"].state in (QPState.CLOSED, QPState.ERROR):
                    del self._conns[qid]
                    self.stats.streams_closed += 1
        return handled

    def _consume(self) -> int:
        c = self.ep.counters
        if self.transport is Transport.UC_WRITE:
            if c.messages_completed != self.stats.messages:
                self.stats.messages = c.messages_completed
                self.stats.bytes = c.bytes_delivered
                self._mark()
            return 0
        wcs = self.recv_cq.poll(1 << 16)
        if wcs:
            self._mark()
        on_message = self.on_message
        for wc in wcs:
            if wc.status is not WCStatus.SUCCESS:
                continue
            st = self._conns.get(wc.qp_id)
            if st is None:
                continue
            self.stats.messages += 1
            self.stats.bytes += wc.byte_len
            if self.transport is Transport.UC_SENDRECV:
                size = max(self.opts.message_size, 1)
                bufs = st["bufs"]
                if on_message is not None:
                    on_message(bufs.view[wc.wr_id * size:wc.wr_id * size + wc.byte_len])
                qp = st["qp"]
                if qp.state is QPState.CONNECTED:
                    qp.post_recv(WorkRequest.recv(wc.wr_id, bufs, wc.wr_id * size, size))
            elif on_message is not None:
                off = wc.imm * self.opts.message_size
                on_message(st["ring"].view[off:off + wc.byte_len])
        return len(wcs)

    def close(self) -> None:
        self.ep.close()


class UdpReceiver(Receiver):
    transport = Transport.UDP_STREAM

    def __init__(self, bind, opts: TransportOptions, on_message=None):
        super().__init__(opts, on_message)
        family = socket.getaddrinfo(*bind, type=socket.SOCK_DGRAM)[0][0]
        self.sock = socket.socket(family, socket.SOCK_DGRAM)
        _set_buffers(self.sock, opts.socket_buffer)
        self.sock.bind(bind)
        self.sock.setblocking(False)
        self._buf = bytearray(UDP_MAX + 1)
        self._view = memoryview(self._buf)

    @property
    def address(self) -> tuple:
        return self.sock.getsockname()[:2]

    def fileno(self) -> int:
        return self.sock.fileno()

    def poll(self) -> int:
        recv_into = self.sock.recv_into
        buf = self._buf
        size = self.opts.message_size
        on_message = self.on_message
        st = self.stats
        n_msgs = 0
        for _ in range(512):
            try:
                n = recv_into(buf)
            except BlockingIOError:
                break
            if n != size:
                continue
            n_msgs += 1
            if on_message is not None:
                on_message(self._view[:n])
        if n_msgs:
            st.messages += n_msgs
            st.bytes += n_msgs * size
            self._mark()
        return n_msgs

    def close(self) -> None:
        self.sock.close()


class TcpReceiver(Receiver):
    """Reads each connection one message at a time into a message-sized application buffer."""

    transport = Transport.TCP_STREAM

    def __init__(self, bind, opts: TransportOptions, on_message=None):
        super().__init__(opts, on_message)
        family = socket.getaddrinfo(*bind, type=socket.SOCK_STREAM)[0][0]
        self.lsock = socket.socket(family, socket.SOCK_STREAM)
        self.lsock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self.lsock.bind(bind)
        self.lsock.listen(64)
        self.lsock.setblocking(False)
        self._conns: dict[int, list] = {}  # fd -> [sock, buffer, view, filled]

    @property
    def address(self) -> tuple:
        return self.lsock.getsockname()[:2]

    def fileno(self) -> int:
        return self.lsock.fileno()

    def filenos(self) -> list[int]:
        return [self.lsock.fileno(), *self._conns]

    def poll(self) -> int:
        handled = 0
        while True:
            try:
                s, _ = self.lsock.accept()
            except BlockingIOError:
                break
            _set_buffers(s, self.opts.socket_buffer)
            s.setblocking(False)
            buf = bytearray(self.opts.message_size)
            self._conns[s.fileno()] = [s, buf, memoryview(buf), 0]
            self.stats.streams_opened += 1
        size = self.opts.message_size
        on_message = self.on_message
        st = self.stats
        got = 0
        for fd, entry in list(self._conns.items()):
            s, _, view, filled = entry
            for _ in range(256):
                try:
                    n = s.recv_into(view[filled:])
                except BlockingIOError:
                    break
                except ConnectionError:
                    n = 0
                if n == 0:
                    s.close()
                    del self._conns[fd]
                    st.streams_closed += 1
                    break
                filled += n
                handled += 1
                if filled == size:
                    filled = 0
                    got += 1
                    if on_message is not None:
                        on_message(view)
            entry[3] = filled
        if got:
            st.messages += got
            st.bytes += got * size
            self._mark()
        return handled

    def close(self) -> None:
        for entry in self._conns.values():
            entry[0].close()
        self._conns.clear()
        self.lsock.close()


def make_receiver(transport: Transport | str, bind, opts: TransportOptions, on_message=None) -> Receiver:
    transport = Transport(transport)
    opts.validate(transport)
    if transport.is_uc:
        return UcReceiver(transport, bind, opts, on_message)
    if transport is Transport.UDP_STREAM:
        return UdpReceiver(bind, opts, on_message)
    return TcpReceiver(bind, opts, on_message)


def run_receivers(receivers: list[Receiver], stop, idle_wait: float = 0.005) -> None:
    """Service ``receivers`` on the calling thread until ``stop()`` is true."""
    while not stop():
        busy = 0
        for r in receivers:
            busy += r.poll()
        if busy:
            continue
        fds = []
        for r in receivers:
            fds.extend(r.filenos() if isinstance(r, TcpReceiver) else [r.fileno()])
        try:
            select.select(fds, [], [], idle_wait)
        except (OSError, ValueError):
            if stop():
                return
            raise


# ------------------------------------------------------------------ senders


class Sender:
    """Emits one message per :meth:`send` call.

    ``fill(view, seq)``, when given, writes the message content in place
    before it is handed to the transport.
    """

    def __init__(self, transport: Transport, opts: TransportOptions):
        self.transport = transport
        self.opts = opts
        self.seq = 0
        self.sent_bytes = 0

    def send(self, fill=None) -> None:
        raise NotImplementedError

    def flush(self, timeout: float = 2.0) -> None:
        pass

    def close(self) -> None:
        raise NotImplementedError

    def delivered(self) -> tuple[int, int]:
        """For pull transports (uc_read) the sender side is where data lands."""
        return 0, 0


class UcSender(Sender):
    def __init__(self, transport: Transport, peer, opts: TransportOptions):
        super().__init__(transport, opts)
        self.ep = ep = Endpoint(_endpoint_config(transport, opts), impairment=opts.impairment)
        self.send_cq = ep.create_cq(1 << 12)
        self.recv_cq = ep.create_cq(1 << 12)
        self.qp = qp = ep.create_qp(self.send_cq, self.recv_cq)
        self.remote: tuple | None = None
        self._adv = ep.register_memory(bytearray(ADVERT.size))
        ep.connect(qp, peer, wait=False)
        needs_advert = transport is not Transport.UC_SENDRECV
        if needs_advert:
            qp.post_recv(WorkRequest.recv(0, self._adv))
        if not ep.wait_for(lambda: qp.state is not QPState.CONNECTING, opts.connect_timeout) \
                or qp.state is not QPState.CONNECTED:
            ep.close()
            raise TransportError(f"connect to {peer} failed: {qp.error or qp.state.value}")
        if needs_advert:
            if not ep.wait_for(lambda: len(self.recv_cq) > 0, opts.connect_timeout):
                ep.close()
                raise TransportError("receiver did not advertise its region")
            self._take_advert()
        size = max(opts.message_size, 1)
        self.slots = opts.window
        self.src = ep.register_memory(bytearray(size * self.slots))
        self._free = list(range(self.slots - 1, -1, -1))
        self._slot_of: dict[int, int] = {}
        self.read_ok = 0
        self.read_bytes = 0
        self.read_timeouts = 0

    def _take_advert(self) -> None:
        for wc in self.recv_cq.poll(64):
            if wc.status is WCStatus.SUCCESS and wc.byte_len == ADVERT.size:
                self.remote = ADVERT.unpack(self._adv.view)
            if self.qp.state is QPState.CONNECTED:
                self.qp.post_recv(WorkRequest.recv(0, self._adv))

    def _reap(self) -> None:
        for wc in self.send_cq.poll(1 << 12):
            slot = self._slot_of.pop(wc.wr_id, None)
            if slot is not None:
                self._free.append(slot)
            if wc.opcode is WROpcode.READ:
                if wc.status is WCStatus.SUCCESS:
                    self.read_ok += 1
                    self.read_bytes += wc.byte_len
                elif wc.status is WCStatus.READ_TIMEOUT:
                    self.read_timeouts += 1
        if len(self.recv_cq):
            self._take_advert()

    def send(self, fill=None) -> None:
        ep = self.ep
        qp = self.qp
        while not self._free:
            if qp.state is not QPState.CONNECTED:
                raise TransportError(f"connection {qp.state.value}")
            ep.progress()
            self._reap()
            if not self._free:
                select.select([ep.sock], [ep.sock] if ep._tx_pending else [], [], 0.001)
        slot = self._free.pop()
        size = self.opts.message_size
        off = slot * max(size, 1)
        seq = self.seq
        if fill is not None:
            fill(self.src.view[off:off + size], seq)
        stag, slot_size, nslots = self.remote or (0, 0, 1)
        t = self.transport
        if t is Transport.UC_SENDRECV:
            wr = WorkRequest.send(seq, self.src, off, size)
        elif t is Transport.UC_READ:
            ring = seq % nslots
            wr = WorkRequest.read(seq, self.src, stag, ring * slot_size, off, size)
        else:
            ring = seq % nslots
            imm = ring if t is Transport.UC_WRITE_IMM else None
            wr = WorkRequest.write(seq, self.src, stag, ring * slot_size, off, size, imm=imm)
        self._slot_of[seq] = slot
        qp.post_send(wr)
        self.seq = seq + 1
        self.sent_bytes += size
        ep.progress()
        self._reap()

    def flush(self, timeout: float = 2.0) -> None:
        deadline = time.monotonic() + timeout
        ep = self.ep
        while len(self._free) < self.slots and time.monotonic() < deadline:
            if self.qp.state is not QPState.CONNECTED:
                break
            ep.progress()
            self._reap()
            if len(self._free) < self.slots:
                select.select([ep.sock], [], [], 0.001)

    def delivered(self) -> tuple[int, int]:
        return self.read_ok, self.read_bytes

    def close(self) -> None:
        try:
            if self.qp.state is QPState.CONNECTED:
                self.ep.disconnect(self.qp)
                self.ep.progress()
        finally:
            self.ep.close()


class UdpSender(Sender):
    def __init__(self, peer, opts: TransportOptions):
        super().__init__(Transport.UDP_STREAM, opts)
        info = socket.getaddrinfo(*peer, type=socket.SOCK_DGRAM)[0]
        self.peer = info[4][:2]
        self.sock = socket.socket(info[0], socket.SOCK_DGRAM)
        _set_buffers(self.sock, opts.socket_buffer)
        self.buf = bytearray(opts.message_size)
        self.view = memoryview(self.buf)
        self._impair = Impairment(opts.impairment) if opts.impairment is not None else None

    def send(self, fill=None) -> None:
        if fill is not None:
            fill(self.view, self.seq)
        self.seq += 1
        self.sent_bytes += len(self.buf)
        if self._impair is None:
            out = (self.buf,)
        else:
            out = self._impair.feed(bytes(self.buf))
        for dg in out:
            self._sendto(dg)

    def _sendto(self, dg) -> None:
        while True:
            try:
                self.sock.sendto(dg, self.peer)
                return
            except BlockingIOError:
                select.select([], [self.sock], [], 0.01)
            except OSError as exc:
                if exc.errno in (errno.ECONNREFUSED, errno.ENOBUFS):
                    return
                raise

    def flush(self, timeout: float = 2.0) -> None:
        if self._impair is not None:
            for dg in self._impair.flush():
                self._sendto(dg)

    def close(self) -> None:
        self.flush()
        self.sock.close()


class TcpSender(Sender):
    def __init__(self, peer, opts: TransportOptions):
        super().__init__(Transport.TCP_STREAM, opts)
        self.sock = socket.create_connection(peer, timeout=opts.connect_timeout)
        _set_buffers(self.sock, opts.socket_buffer)
        self.sock.settimeout(None)
        self.sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        if opts.tcp_congestion:
            try:
                self.sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_CONGESTION, opts.tcp_congestion.encode())
            except OSError as exc:
                log.warning("cannot select TCP congestion control %r: %s", opts.tcp_congestion, exc)
        self.buf = bytearray(opts.message_size)
        self.view = memoryview(self.buf)

    def send(self, fill=None) -> None:
        if fill is not None:
            fill(self.view, self.seq)
        self.sock.sendall(self.buf)
        self.seq += 1
        self.sent_bytes += len(self.buf)

    def close(self) -> None:
        try:
            self.sock.shutdown(socket.SHUT_WR)
        except OSError:
            pass
        self.sock.close()


def make_sender(transport: Transport | str, peer, opts: TransportOptions) -> Sender:
    transport = Transport(transport)
    opts.validate(transport)
    if transport.is_uc:
        return UcSender(transport, peer, opts)
    if transport is Transport.UDP_STREAM:
        return UdpSender(peer, opts)
    if opts.impairment is not None:
        raise ValueError("tcp_stream cannot be impaired in-process; route it through a TunReflector")
    return TcpSender(peer, opts)


def _set_buffers(sock: socket.socket, size: int) -> None:
    for opt, force in ((socket.SO_RCVBUF, 33), (socket.SO_SNDBUF, 32)):
        try:
            sock.setsockopt(socket.SOL_SOCKET, force, size)
        except OSError:
            try:
                sock.setsockopt(socket.SOL_SOCKET, opt, size)
            except OSError:
                pass


# ------------------------------------------------------------------- pacing


@dataclass
class TokenBucket:
    """Message pacer: tokens accrue continuously at ``rate`` messages/s and are
    checked at ``tick`` granularity.

    The bucket holds ``depth`` messages on top of one tick's worth of tokens.
    Without the extra tick, rates above ``depth / tick`` would be unreachable,
    and a sleep that overshoots its tick would silently discard tokens.
    """

    rate: float
    depth: int = 4
    tick: float = 0.001
    clock: object = time.monotonic
    sleep: object = time.sleep
    tokens: float = field(init=False)
    _last: float = field(init=False)

    def __post_init__(self):
        if self.rate <= 0:
            raise ValueError("rate must be positive")
        self.capacity = self.depth + self.rate * self.tick
        self.tokens = self.capacity
        self._last = self.clock()

    @classmethod
    def for_bits(cls, rate_bps: float, message_size: int, **kw) -> TokenBucket:
        return cls(rate_bps / (max(message_size, 1) * 8), **kw)

    def reset(self) -> None:
        """Start a fresh pacing interval with a full bucket."""
        self.tokens = self.capacity
        self._last = self.clock()

    def _refill(self) -> None:
        now = self.clock()
        self.tokens = min(self.capacity, self.tokens + (now - self._last) * self.rate)
        self._last = now

    def acquire(self) -> None:
        if self.tokens < 1:
            self._refill()
            while self.tokens < 1:
                self.sleep(max(self.tick, (1 - self.tokens) / self.rate))
                self._refill()
        self.tokens -= 1
