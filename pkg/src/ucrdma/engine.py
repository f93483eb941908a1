"""Datagram transport engine.

Send side: work requests are segmented into datagrams whose payloads are
views of the registered source buffer. Receive side: each fragment is copied
once, straight from the datagram buffer into its final target range. A
message whose fragments do not all arrive is retired without any completion
(window eviction or reassembly timeout); the connection is never affected.
"""

from __future__ import annotations

import errno
import logging
import math
import random
import select
import socket
import threading
import time
from bisect import bisect_left
from collections import OrderedDict, deque
from dataclasses import dataclass

from . import wire
from .impair import Impairment, ImpairmentSpec
from .metrics import CounterSet
from .verbs import (
    Access,
    BadStateError,
    CompletionQueue,
    InvalidRangeError,
    MAX_REGION,
    MemoryRegion,
    QPState,
    QueuePair,
    ReadDisabledError,
    ReadLimitError,
    RegionInUseError,
    VerbsError,
    WCStatus,
    WorkCompletion,
    WorkRequest,
    WROpcode,
)
from .wire import HEADER, HEADER_SIZE, U32, Flags, Opcode

log = logging.getLogger(__name__)

_SEND = int(Opcode.SEND)
_WRITE = int(Opcode.WRITE)
_WRITE_IMM = int(Opcode.WRITE_IMM)
_READ_REQ = int(Opcode.READ_REQ)
_READ_RESP = int(Opcode.READ_RESP)
_FIRST = int(Flags.FIRST)
_LAST = int(Flags.LAST)
_SINGLE = _FIRST | _LAST
_REMOTE_WRITE = int(Access.REMOTE_WRITE)

_WIRE_OP = {
    WROpcode.SEND: Opcode.SEND,
    WROpcode.WRITE: Opcode.WRITE,
    WROpcode.WRITE_IMM: Opcode.WRITE_IMM,
}

# how many retired msns are remembered per connection to reject late fragments
RETIRED_MEMORY = 4096
MAX_DATAGRAM = 65507


@dataclass
class EndpointConfig:
    max_payload: int = wire.DEFAULT_MAX_PAYLOAD
    reassembly_window: int = 8
    reassembly_timeout: float = 0.5
    read_enabled: bool = False
    read_timeout: float | None = None
    max_outstanding_reads: int = 16
    socket_buffer: int = 4 << 20
    cq_capacity: int = 4096
    cm_retries: int = 5
    cm_interval: float = 0.2
    disconnect_retries: int = 3
    listen_backlog: int = 1024
    rx_budget: int = 512
    tx_budget: int = 512

    def __post_init__(self):
        if not 1 <= self.max_payload <= MAX_DATAGRAM - HEADER_SIZE:
            raise ValueError(f"max_payload must be in [1, {MAX_DATAGRAM - HEADER_SIZE}]")
        if self.reassembly_window < 1:
            raise ValueError("reassembly_window must be >= 1")
        if self.reassembly_timeout <= 0:
            raise ValueError("reassembly_timeout must be positive")
        if self.read_timeout is not None and self.read_timeout <= 0:
            raise ValueError("read_timeout must be positive or None")
        if self.max_outstanding_reads < 1 or self.cm_retries < 1:
            raise ValueError("limits must be >= 1")


def fragment_count(msg_len: int, max_payload: int) -> int:
    return max(1, math.ceil(msg_len / max_payload))


def fragment_ranges(msg_len: int, max_payload: int):
    """Yield ``(offset, length)`` for each fragment; a 0-byte message has one empty fragment."""
    if msg_len == 0:
        yield 0, 0
        return
    for off in range(0, msg_len, max_payload):
        yield off, min(max_payload, msg_len - off)


def segment_message(wr: WorkRequest, msn: int, max_payload: int, source, *, conn_id: int = 0):
    """Split the message described by ``wr`` into ``(DatagramHeader, payload view)`` pairs.

    ``source`` is the local registered buffer named by ``wr.stag``; the
    payloads are memoryview slices of it, never copies.
    """
    view = memoryview(source).cast("B")[wr.offset:wr.offset + wr.length]
    op = _WIRE_OP[wr.opcode]
    tagged = op in wire.TAGGED
    out = []
    for off, n in fragment_ranges(wr.length, max_payload):
        h = wire.DatagramHeader(
            opcode=op,
            flags=wire.fragment_flags(off, n, wr.length),
            conn_id=conn_id,
            msn=msn,
            frag_offset=off,
            msg_len=wr.length,
            stag=wr.remote_stag if tagged else 0,
            tagged_offset=wr.remote_offset if tagged else 0,
            imm=wr.imm if op is Opcode.WRITE_IMM else 0,
        )
        out.append((h, view[off:off + n]))
    return out


def msn_newer(a: int, b: int) -> bool:
    """Serial-number comparison: is ``a`` after ``b`` modulo 2**32?"""
    return 0 < ((a - b) & U32) < 0x80000000


class Coverage:
    """Disjoint, sorted byte ranges received so far for one message."""

    __slots__ = ("starts", "ends", "total")

    def __init__(self):
        self.starts: list[int] = []
        self.ends: list[int] = []
        self.total = 0

    def add(self, start: int, end: int) -> list[tuple[int, int]]:
        """Mark ``[start, end)`` covered and return the parts that were not covered before."""
        if start >= end:
            return []
        starts, ends = self.starts, self.ends
        if ends and ends[-1] == start:
            ends[-1] = end
            self.total += end - start
            return [(start, end)]
        i = bisect_left(ends, start)
        j = i
        cur = start
        lo, hi = start, end
        gaps = []
        while j < len(starts) and starts[j] <= end:
            s, e = starts[j], ends[j]
            if s > cur:
                gaps.append((cur, s))
            if e > cur:
                cur = e
            if s < lo:
                lo = s
            if e > hi:
                hi = e
            j += 1
        if cur < end:
            gaps.append((cur, end))
        starts[i:j] = [lo]
        ends[i:j] = [hi]
        for s, e in gaps:
            self.total += e - s
        return gaps

    def covers(self, start: int, end: int) -> bool:
        i = bisect_left(self.ends, end)
        return i < len(self.starts) and self.starts[i] <= start

    def ranges(self) -> list[tuple[int, int]]:
        return list(zip(self.starts, self.ends))


class ReassemblyState:
    __slots__ = ("msn", "opcode", "msg_len", "coverage", "target", "base", "region",
                 "stag", "tagged_offset", "imm", "deadline", "copied", "recv_wr")

    def __init__(self, msn, opcode, msg_len, target, base, region, deadline,
                 stag=0, tagged_offset=0, imm=0, recv_wr=None):
        self.msn = msn
        self.opcode = opcode
        self.msg_len = msg_len
        self.coverage = Coverage()
        self.target = target
        self.base = base
        self.region = region
        self.stag = stag
        self.tagged_offset = tagged_offset
        self.imm = imm
        self.deadline = deadline
        self.copied = 0
        self.recv_wr = recv_wr

    @property
    def complete(self) -> bool:
        return self.coverage.total == self.msg_len


class ReadState:
    __slots__ = ("read_id", "wr", "region", "sink_offset", "length", "coverage",
                 "deadline", "copied")

    def __init__(self, read_id, wr, region, deadline):
        self.read_id = read_id
        self.wr = wr
        self.region = region
        self.sink_offset = wr.offset
        self.length = wr.length
        self.coverage = Coverage()
        self.deadline = deadline
        self.copied = 0

    # placement goes through the same path as ReassemblyState
    @property
    def target(self):
        return self.region.view

    @property
    def base(self) -> int:
        return self.sink_offset

    @property
    def msg_len(self) -> int:
        return self.length


class ConnState:
    """Receive-side and read-initiator state of one queue pair."""

    __slots__ = ("qp", "tagged", "untagged", "last_untagged", "retired", "high_msn",
                 "reads", "next_read_id", "reads_outstanding", "peer_features", "record")

    def __init__(self, qp: QueuePair):
        self.qp = qp
        self.tagged: OrderedDict[int, ReassemblyState] = OrderedDict()
        self.untagged: ReassemblyState | None = None
        self.last_untagged: int | None = None
        self.retired: OrderedDict[int, None] = OrderedDict()
        self.high_msn: int | None = None
        self.reads: dict[int, ReadState] = {}
        self.next_read_id = 1
        self.reads_outstanding = 0
        self.peer_features = 0
        self.record = None

    def retire(self, msn: int) -> None:
        # only validated messages get here, so a forged msn cannot move the horizon
        self.retired[msn] = None
        if len(self.retired) > RETIRED_MEMORY:
            self.retired.popitem(last=False)
        high = self.high_msn
        if high is None or msn_newer(msn, high):
            self.high_msn = msn

    def is_stale(self, msn: int) -> bool:
        if msn in self.retired:
            return True
        high = self.high_msn
        if high is None or msn_newer(msn, high):
            return False
        return not msn_newer(msn, (high - RETIRED_MEMORY) & U32)


class TxJob:
    __slots__ = ("qp", "wr", "kind", "msn", "source", "region", "msg_len", "next_off",
                 "done", "stag", "tagged_offset", "imm", "payload")

    def __init__(self, qp, wr, kind, msn, source, region, msg_len, stag=0,
                 tagged_offset=0, imm=0, payload=None):
        self.qp = qp
        self.wr = wr
        self.kind = kind
        self.msn = msn
        self.source = source
        self.region = region
        self.msg_len = msg_len
        self.next_off = 0
        self.done = False
        self.stag = stag
        self.tagged_offset = tagged_offset
        self.imm = imm
        self.payload = payload


class Endpoint:
    """A UDP socket carrying any number of unreliable-connected queue pairs.

    Drive it either by calling :meth:`progress` (single-threaded, optionally
    with a virtual clock) or by :meth:`start`-ing a background progress
    thread. Verbs may be called from any thread; :meth:`progress` must only be
    called by one thread at a time.
    """

    def __init__(self, config: EndpointConfig | None = None, *, bind=None, clock=None,
                 impairment: ImpairmentSpec | None = None):
        from .cm import ConnectionManager

        self.config = config or EndpointConfig()
        self.clock = clock or time.monotonic
        self.counters = CounterSet()
        self.sock: socket.socket | None = None
        self.closed = False
        self.error: str | None = None
        self._rng = random.Random()
        self._lock = threading.RLock()
        # serializes progress() against control-plane calls made from other threads
        self._progress_lock = threading.RLock()
        self._regions: dict[int, MemoryRegion] = {}
        self._conns: dict[int, ConnState] = {}
        self._txq: deque[TxJob] = deque()
        self._tx_pending: deque = deque()
        self._timer_due = math.inf
        self._rxbuf = bytearray(MAX_DATAGRAM + 1)
        self._rxview = memoryview(self._rxbuf)
        self._impair = Impairment(impairment) if impairment is not None else None
        self._thread: threading.Thread | None = None
        self._running = False
        self._wake_r, self._wake_w = socket.socketpair()
        self._wake_r.setblocking(False)
        self._wake_w.setblocking(False)
        self._sleeping = False
        self.cm = ConnectionManager(self)
        if bind is not None:
            self.bind(bind)

    # ------------------------------------------------------------------ setup

    def bind(self, addr=("127.0.0.1", 0)) -> tuple:
        if self.sock is not None:
            raise BadStateError("endpoint already bound")
        host, port = addr
        family = socket.getaddrinfo(host, port, type=socket.SOCK_DGRAM)[0][0]
        sock = socket.socket(family, socket.SOCK_DGRAM)
        try:
            sock.bind((host, port))
        except OSError:
            sock.close()
            raise
        for opt, force in ((socket.SO_RCVBUF, 33), (socket.SO_SNDBUF, 32)):
            # SO_RCVBUFFORCE / SO_SNDBUFFORCE lift the sysctl cap when permitted
            try:
                sock.setsockopt(socket.SOL_SOCKET, force, self.config.socket_buffer)
            except OSError:
                sock.setsockopt(socket.SOL_SOCKET, opt, self.config.socket_buffer)
        sock.setblocking(False)
        self.sock = sock
        return self.address

    @property
    def address(self) -> tuple:
        if self.sock is None:
            raise BadStateError("endpoint not bound")
        return self.sock.getsockname()[:2]

    def _ensure_bound(self, peer) -> None:
        if self.sock is None:
            host = "::" if ":" in peer[0] else "127.0.0.1" if peer[0].startswith("127.") else "0.0.0.0"
            self.bind((host, 0))

    def set_impairment(self, spec: ImpairmentSpec | None) -> None:
        """Install (or remove) a seeded impairment filter on this endpoint's transmit path."""
        with self._progress_lock:
            if self._impair is not None and self._impair.holds:
                self._tx_pending.extend(self._impair.flush())
            self._impair = Impairment(spec) if spec is not None else None

    @property
    def impairment(self) -> Impairment | None:
        return self._impair

    def _fresh_id(self, taken) -> int:
        while True:
            x = self._rng.getrandbits(32)
            if x and x not in taken:
                return x

    # ------------------------------------------------------------------ verbs

    def register_memory(self, buffer, access: Access = Access.LOCAL) -> MemoryRegion:
        if self.closed:
            raise BadStateError("endpoint closed")
        length = memoryview(buffer).nbytes
        if length < 1:
            raise InvalidRangeError("cannot register an empty buffer")
        if length > MAX_REGION:
            raise InvalidRangeError("regions are limited to 4 GiB")
        with self._lock:
            region = MemoryRegion(self, buffer, access, self._fresh_id(self._regions))
            self._regions[region.stag] = region
        return region

    def deregister_memory(self, region: MemoryRegion) -> None:
        with self._lock:
            if not region.live or self._regions.get(region.stag) is not region:
                raise VerbsError(f"region {region.stag:#x} is not registered")
            if region.inflight:
                raise RegionInUseError(f"region {region.stag:#x} has {region.inflight} work requests in flight")
            region.live = False
            del self._regions[region.stag]

    def create_cq(self, capacity: int | None = None) -> CompletionQueue:
        return CompletionQueue(capacity or self.config.cq_capacity)

    def create_qp(self, send_cq: CompletionQueue | None = None,
                  recv_cq: CompletionQueue | None = None) -> QueuePair:
        if self.closed:
            raise BadStateError("endpoint closed")
        if send_cq is None:
            send_cq = self.create_cq()
        if recv_cq is None:
            recv_cq = send_cq
        with self._lock:
            qp = QueuePair(self, self._fresh_id(self._conns), send_cq, recv_cq)
            self._conns[qp.qp_id] = ConnState(qp)
        return qp

    def _local_region(self, stag: int, offset: int, length: int) -> MemoryRegion:
        region = self._regions.get(stag)
        if region is None or not region.live:
            raise InvalidRangeError(f"unknown local stag {stag:#x}")
        if not region.contains(offset, length):
            raise InvalidRangeError(f"[{offset}, {offset + length}) outside region of {region.length} bytes")
        return region

    def post_send(self, qp: QueuePair, wr: WorkRequest) -> None:
        if wr.opcode not in (WROpcode.SEND, WROpcode.WRITE, WROpcode.WRITE_IMM, WROpcode.READ):
            raise ValueError(f"{wr.opcode.name} cannot be posted to the send queue")
        conn = self._conns[qp.qp_id]
        with qp._post_lock:
            if qp.state is not QPState.CONNECTED:
                raise BadStateError(f"queue pair is {qp.state.value}")
            with self._lock:
                region = self._local_region(wr.stag, wr.offset, wr.length)
                if wr.opcode is WROpcode.READ:
                    if not (self.config.read_enabled and conn.peer_features & wire.FEATURE_READ):
                        raise ReadDisabledError("RDMA Read is not enabled on this connection")
                    if conn.reads_outstanding >= self.config.max_outstanding_reads:
                        raise ReadLimitError(f"{conn.reads_outstanding} reads outstanding")
                elif wr.remote_stag is not None and wr.remote_offset + wr.length > U32:
                    raise InvalidRangeError("remote target beyond the 32-bit tagged offset space")
                qp.send_cq.reserve()
                region.inflight += 1
                if wr.opcode is WROpcode.READ:
                    conn.reads_outstanding += 1
            msn = qp.send_msn
            qp.send_msn = (msn + 1) & U32
            source = region.view[wr.offset:wr.offset + wr.length]
            self._txq.append(TxJob(qp, wr, wr.opcode, msn, source, region, wr.length,
                                   wr.remote_stag or 0, wr.remote_offset, wr.imm))
        self._wake()

    def post_recv(self, qp: QueuePair, wr: WorkRequest) -> None:
        if wr.opcode is not WROpcode.RECV:
            raise ValueError("post_recv takes RECV work requests")
        with qp._post_lock:
            if qp.state not in (QPState.CONNECTED, QPState.CONNECTING):
                raise BadStateError(f"queue pair is {qp.state.value}")
            with self._lock:
                region = self._local_region(wr.stag, wr.offset, wr.length)
                qp.recv_cq.reserve()
                region.inflight += 1
            qp.recv_queue.append(wr)

    def connect(self, qp: QueuePair, peer, timeout: float | None = None, wait: bool = True) -> QPState:
        """Start the connection handshake; with ``wait`` block until it settles."""
        host, port = peer
        info = socket.getaddrinfo(host, port, type=socket.SOCK_DGRAM)[0][4][:2]
        self._ensure_bound(info)
        with self._progress_lock:
            self.cm.connect(qp, info, self.clock())
        self._wake()
        if wait:
            self.wait_for(lambda: qp.state is not QPState.CONNECTING, timeout)
        return qp.state

    def listen(self, port: int = 0, host: str = "127.0.0.1", *, on_request=None,
               send_cq: CompletionQueue | None = None, recv_cq: CompletionQueue | None = None):
        if self.sock is None:
            self.bind((host, port))
        elif port and self.address[1] != port:
            raise BadStateError(f"endpoint already bound to {self.address}")
        return self.cm.listen(on_request=on_request, send_cq=send_cq, recv_cq=recv_cq)

    def disconnect(self, qp: QueuePair) -> None:
        with qp._post_lock, self._progress_lock:
            self.cm.disconnect(qp, self.clock())
        self._wake()

    # --------------------------------------------------------------- progress

    def start(self) -> Endpoint:
        """Run the progress loop on a background thread."""
        if self._thread is not None:
            return self
        if self.sock is None:
            self.bind()
        self._running = True
        self._thread = threading.Thread(target=self._loop, name="ucrdma-progress", daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self._running = False
        if self._thread is not None:
            self._wake(force=True)
            self._thread.join()
            self._thread = None

    def close(self) -> None:
        self.stop()
        self.closed = True
        if self.sock is not None:
            self.sock.close()
        self._wake_r.close()
        self._wake_w.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def _wake(self, force: bool = False) -> None:
        if self._thread is not None and (self._sleeping or force):
            try:
                self._wake_w.send(b"\0")
            except OSError:
                pass

    def _loop(self) -> None:
        while self._running:
            self.progress()
            if not self._running:
                break
            if self._txq or self._tx_pending:
                wait = 0.0
            else:
                wait = min(max(self._timer_due - self.clock(), 0.0), 0.05)
            self._sleeping = True
            try:
                if self._txq:
                    wait = 0.0
                rlist = [self.sock, self._wake_r]
                wlist = [self.sock] if self._tx_pending else []
                r, _, _ = select.select(rlist, wlist, [], wait)
            except (OSError, ValueError):
                if self.closed:
                    return
                raise
            finally:
                self._sleeping = False
            if self._wake_r in r:
                try:
                    while self._wake_r.recv(4096):
                        pass
                except BlockingIOError:
                    pass

    def wait_for(self, predicate, timeout: float | None = None) -> bool:
        """Wait until ``predicate()`` holds, driving progress ourselves if no thread does."""
        deadline = None if timeout is None else time.monotonic() + timeout
        while not predicate():
            remaining = None if deadline is None else deadline - time.monotonic()
            if remaining is not None and remaining <= 0:
                return False
            if self._thread is not None:
                time.sleep(min(0.001, remaining or 0.001))
                continue
            self.progress()
            if predicate():
                break
            step = min(max(self._timer_due - self.clock(), 0.0), 0.01)
            if remaining is not None:
                step = min(step, remaining)
            if self.sock is not None and not self._txq:
                select.select([self.sock], [], [], step)
        return True

    def next_deadline(self) -> float:
        return self._timer_due

    def progress(self, now: float | None = None) -> list[WorkCompletion]:
        """Do a bounded amount of work: receive, transmit, then run timers.

        Returns the completions generated during this call.
        """
        if self.sock is None or self.closed:
            return []
        with self._progress_lock:
            if now is None:
                now = self.clock()
            events: list[WorkCompletion] = []
            self._events = events
            try:
                self._rx(now)
                self._tx()
            except OSError as exc:
                self._fail(exc)
            if now >= self._timer_due:
                self._run_timers(now)
            self._events = None
            return events

    def _fail(self, exc: OSError) -> None:
        log.error("socket failure: %s", exc)
        self.error = str(exc)
        for conn in list(self._conns.values()):
            if conn.qp.state in (QPState.CONNECTED, QPState.CONNECTING):
                self._flush_qp(conn.qp, QPState.ERROR, str(exc))

    def _complete(self, cq: CompletionQueue, wc: WorkCompletion, reserved: bool = True) -> None:
        if cq.push(wc, reserved) and self._events is not None:
            self._events.append(wc)
        elif not reserved and cq.overflows:
            self.counters.cq_overflow += 1

    _events: list | None = None

    # ---------------------------------------------------------------- timers

    def _arm(self, deadline: float) -> None:
        if deadline < self._timer_due:
            self._timer_due = deadline

    def _run_timers(self, now: float) -> None:
        self._timer_due = math.inf
        self.expire_incomplete(now)
        self._expire_reads(now)
        self.cm.run_timers(now)

    def expire_incomplete(self, now: float) -> int:
        """Silently retire every reassembly whose deadline has passed; return how many."""
        retired = 0
        c = self.counters
        for conn in list(self._conns.values()):
            tagged = conn.tagged
            while tagged:
                msn, st = next(iter(tagged.items()))
                if st.deadline > now:
                    self._arm(st.deadline)
                    break
                del tagged[msn]
                self._drop_incomplete(conn, st)
                retired += 1
            st = conn.untagged
            if st is not None:
                if st.deadline <= now:
                    conn.untagged = None
                    self._drop_incomplete(conn, st)
                    retired += 1
                else:
                    self._arm(st.deadline)
        c.reassembly_timeouts += retired
        return retired

    def _drop_incomplete(self, conn: ConnState, st: ReassemblyState) -> None:
        conn.retire(st.msn)
        c = self.counters
        c.messages_dropped_incomplete += 1
        c.payload_copy_bytes_discarded += st.copied

    def _expire_reads(self, now: float) -> None:
        for conn in list(self._conns.values()):
            if not conn.reads:
                continue
            for rid, rs in list(conn.reads.items()):
                if rs.deadline is None:
                    continue
                if rs.deadline <= now:
                    del conn.reads[rid]
                    self.counters.read_timeouts += 1
                    self.counters.payload_copy_bytes_discarded += rs.copied
                    self._finish_read(conn, rs, WCStatus.READ_TIMEOUT, 0)
                else:
                    self._arm(rs.deadline)

    def _finish_read(self, conn: ConnState, rs: ReadState, status: WCStatus, byte_len: int) -> None:
        with self._lock:
            rs.region.inflight -= 1
            conn.reads_outstanding -= 1
        self._complete(conn.qp.send_cq, WorkCompletion(
            rs.wr.wr_id, WROpcode.READ, status, byte_len, qp_id=conn.qp.qp_id, msn=rs.read_id))

    # ---------------------------------------------------------------- transmit

    def _emit(self, hdr: bytes, payload, addr) -> None:
        if self._impair is None:
            self._tx_pending.append((hdr, payload, addr))
            return
        if self._impair.holds:
            # a held datagram may outlive the source buffer contents
            payload = bytes(payload)
        self._tx_pending.extend(self._impair.feed((hdr, payload, addr)))

    def _flush_pending(self) -> bool:
        pending = self._tx_pending
        sendmsg = self.sock.sendmsg
        c = self.counters
        while pending:
            hdr, payload, addr = pending[0]
            try:
                sendmsg((hdr, payload), (), 0, addr)
            except BlockingIOError:
                return False
            except OSError as exc:
                if exc.errno not in (errno.ECONNREFUSED, errno.ENOBUFS):
                    raise
                c.tx_errors += 1
            pending.popleft()
            c.datagrams_tx += 1
            c.bytes_tx += HEADER_SIZE + len(payload)
        return True

    def send_control(self, opcode: Opcode, conn_id: int, payload: bytes, addr) -> None:
        self._emit(wire.control_header(opcode, conn_id, len(payload)), payload, addr)
        self._flush_pending()

    def _tx(self) -> None:
        if self._tx_pending and not self._flush_pending():
            return
        budget = self.config.tx_budget
        maxp = self.config.max_payload
        txq = self._txq
        pack = HEADER.pack
        emit = self._emit
        while txq and budget > 0:
            job = txq[0]
            qp = job.qp
            if qp.state is not QPState.CONNECTED:
                txq.popleft()
                self._finish_job(job, WCStatus.FLUSHED)
                continue
            if job.kind is WROpcode.READ:
                self._start_read(job)
                txq.popleft()
                budget -= 1
                continue
            conn_id = qp.remote_conn_id
            peer = qp.peer
            if job.kind is None:
                op = _READ_RESP
            else:
                op = int(_WIRE_OP[job.kind])
            msg_len = job.msg_len
            src = job.source
            while not job.done and budget > 0:
                off = job.next_off
                n = msg_len - off
                if n > maxp:
                    n = maxp
                end = off + n
                flags = (_FIRST if off == 0 else 0) | (_LAST if end == msg_len else 0)
                emit(pack(1, op, flags, 0, conn_id, job.msn, off, msg_len,
                          job.stag, job.tagged_offset, job.imm), src[off:end], peer)
                job.next_off = end
                job.done = end == msg_len
                budget -= 1
            if not self._flush_pending():
                if job.done:
                    txq.popleft()
                    self._finish_job(job, WCStatus.SUCCESS)
                return
            if job.done:
                txq.popleft()
                self._finish_job(job, WCStatus.SUCCESS)
        if not txq and self._impair is not None and self._impair.holds:
            self._tx_pending.extend(self._impair.flush())
            self._flush_pending()

    def _finish_job(self, job: TxJob, status: WCStatus) -> None:
        with self._lock:
            job.region.inflight -= 1
        if job.kind is None:
            return  # read response: no responder-side completion
        c = self.counters
        if status is WCStatus.SUCCESS:
            c.messages_sent += 1
            c.payload_bytes_sent += job.msg_len
        if job.kind is WROpcode.READ:
            conn = self._conns.get(job.qp.qp_id)
            if conn is not None:
                conn.reads_outstanding -= 1
        self._complete(job.qp.send_cq, WorkCompletion(
            job.wr.wr_id, job.kind, status,
            job.msg_len if status is WCStatus.SUCCESS else 0,
            msn=job.msn, qp_id=job.qp.qp_id))

    def _start_read(self, job: TxJob) -> None:
        conn = self._conns[job.qp.qp_id]
        qp = job.qp
        wr = job.wr
        read_id = conn.next_read_id
        conn.next_read_id = (read_id + 1) & U32 or 1
        now = self.clock()
        deadline = None
        if self.config.read_timeout is not None:
            deadline = now + self.config.read_timeout
            self._arm(deadline)
        conn.reads[read_id] = ReadState(read_id, wr, job.region, deadline)
        req = wire.ReadRequestPayload(wr.remote_stag, wr.remote_offset, wr.stag, wr.offset,
                                      wr.length, read_id).encode()
        hdr = HEADER.pack(1, _READ_REQ, _FIRST | _LAST, 0, qp.remote_conn_id, job.msn,
                          0, len(req), 0, 0, 0)
        self._emit(hdr, req, qp.peer)
        self.counters.read_requests_sent += 1

    def _flush_qp(self, qp: QueuePair, state: QPState, error: str | None = None) -> None:
        """Move ``qp`` to a terminal state and flush everything still queued on it."""
        qp._set_state(state, error)
        conn = self._conns.get(qp.qp_id)
        keep = deque()
        while self._txq:
            job = self._txq.popleft()
            if job.qp is qp:
                self._finish_job(job, WCStatus.FLUSHED)
            else:
                keep.append(job)
        self._txq.extend(keep)
        while qp.recv_queue:
            wr = qp.recv_queue.popleft()
            with self._lock:
                region = self._regions.get(wr.stag)
                if region is not None:
                    region.inflight -= 1
            self._complete(qp.recv_cq, WorkCompletion(wr.wr_id, WROpcode.RECV, WCStatus.FLUSHED,
                                                      qp_id=qp.qp_id))
        if conn is not None:
            for rs in list(conn.reads.values()):
                self._finish_read(conn, rs, WCStatus.FLUSHED, 0)
            conn.reads.clear()
            for st in list(conn.tagged.values()):
                self._drop_incomplete(conn, st)
            conn.tagged.clear()
            if conn.untagged is not None:
                self._drop_incomplete(conn, conn.untagged)
                conn.untagged = None

    # ----------------------------------------------------------------- receive

    def _rx(self, now: float) -> None:
        sock = self.sock
        buf = self._rxbuf
        view = self._rxview
        c = self.counters
        conns = self._conns
        recv_into = sock.recvfrom_into
        decode = wire.decode_fields
        n_rx = b_rx = 0
        try:
            for _ in range(self.config.rx_budget):
                try:
                    n, addr = recv_into(buf)
                except BlockingIOError:
                    return
                except OSError as exc:
                    if exc.errno == errno.ECONNREFUSED:
                        continue
                    raise
                n_rx += 1
                b_rx += n
                try:
                    f = decode(buf, n)
                except wire.MalformedDatagram as exc:
                    c.malformed += 1
                    c.bump("malformed_" + exc.reason.value)
                    continue
                op = f[1]
                if op >= 16:
                    self.cm.on_control(f, view[HEADER_SIZE:n], addr[:2], now)
                    continue
                conn = conns.get(f[4])
                if conn is None:
                    c.unknown_conn += 1
                    continue
                qp = conn.qp
                if qp.peer != addr and qp.peer != addr[:2]:
                    c.peer_mismatch += 1
                    continue
                if qp.state is not QPState.CONNECTED:
                    if not self.cm.implicit_establish(conn, now):
                        c.conn_not_connected += 1
                        continue
                if op == _WRITE or op == _WRITE_IMM:
                    if f[2] == _SINGLE and f[5] not in conn.tagged:
                        self._on_single_write(conn, f, view[HEADER_SIZE:n])
                    else:
                        self._on_write(conn, f, view[HEADER_SIZE:n], now)
                elif op == _SEND:
                    self._on_send(conn, f, view[HEADER_SIZE:n], now)
                elif op == _READ_RESP:
                    self._on_read_resp(conn, f, view[HEADER_SIZE:n])
                else:
                    self._on_read_req(conn, f, view[HEADER_SIZE:n])
        finally:
            c.datagrams_rx += n_rx
            c.bytes_rx += b_rx

    def _place(self, st, frag_off: int, payload) -> None:
        """Copy the not-yet-covered parts of a fragment into the target, exactly once."""
        n = len(payload)
        if n == 0:
            return
        gaps = st.coverage.add(frag_off, frag_off + n)
        if len(gaps) == 1 and gaps[0][1] - gaps[0][0] == n:
            base = st.base + frag_off
            st.target[base:base + n] = payload
            st.copied += n
            return
        self.counters.duplicate_fragment += 1
        base = st.base
        for s, e in gaps:
            st.target[base + s:base + e] = payload[s - frag_off:e - frag_off]
            st.copied += e - s

    def _deliver(self, st) -> None:
        c = self.counters
        c.messages_completed += 1
        c.bytes_delivered += st.msg_len
        c.payload_copy_bytes += st.copied

    def _on_single_write(self, conn: ConnState, f, payload) -> None:
        """A whole tagged message in one datagram: no reassembly state needed."""
        c = self.counters
        msn = f[5]
        if conn.is_stale(msn):
            c.stale_fragment += 1
            return
        region = self._regions.get(f[8])
        if region is None:
            c.remote_invalid_stag += 1
            return
        if not region.access & _REMOTE_WRITE:
            c.unauthorized += 1
            return
        toff = f[9]
        msg_len = f[7]
        if toff + msg_len > region.length:
            c.bounds_violation += 1
            conn.retire(msn)
            return
        if msg_len:
            region.view[toff:toff + msg_len] = payload
        conn.retire(msn)
        c.messages_completed += 1
        c.bytes_delivered += msg_len
        c.payload_copy_bytes += msg_len
        if f[1] == _WRITE_IMM:
            qp = conn.qp
            self._complete(qp.recv_cq, WorkCompletion(
                0, WROpcode.RECV_WRITE_IMM, WCStatus.SUCCESS, msg_len,
                True, f[10], msn, qp.qp_id), reserved=False)

    def _on_write(self, conn: ConnState, f, payload, now: float) -> None:
        c = self.counters
        msn = f[5]
        st = conn.tagged.get(msn)
        if st is None:
            if conn.is_stale(msn):
                c.stale_fragment += 1
                return
            stag, toff, msg_len = f[8], f[9], f[7]
            region = self._regions.get(stag)
            if region is None:
                c.remote_invalid_stag += 1
                return
            if not region.access & Access.REMOTE_WRITE:
                c.unauthorized += 1
                return
            if not region.contains(toff, msg_len):
                c.bounds_violation += 1
                conn.retire(msn)
                return
            tagged = conn.tagged
            if len(tagged) >= self.config.reassembly_window:
                _, old = tagged.popitem(last=False)
                self._drop_incomplete(conn, old)
                c.reassembly_evictions += 1
            deadline = now + self.config.reassembly_timeout
            st = ReassemblyState(msn, f[1], msg_len, region.view, toff, region, deadline,
                                 stag, toff, f[10])
            tagged[msn] = st
            self._arm(deadline)
        elif (f[1] != st.opcode or f[7] != st.msg_len or f[8] != st.stag
              or f[9] != st.tagged_offset or f[10] != st.imm):
            del conn.tagged[msn]
            self._drop_incomplete(conn, st)
            c.bounds_violation += 1
            return
        if not st.region.live:
            del conn.tagged[msn]
            self._drop_incomplete(conn, st)
            c.remote_invalid_stag += 1
            return
        self._place(st, f[6], payload)
        if st.coverage.total == st.msg_len:
            del conn.tagged[msn]
            conn.retire(msn)
            self._deliver(st)
            if st.opcode == _WRITE_IMM:
                qp = conn.qp
                self._complete(qp.recv_cq, WorkCompletion(
                    0, WROpcode.RECV_WRITE_IMM, WCStatus.SUCCESS, st.msg_len,
                    imm_valid=True, imm=st.imm, msn=msn, qp_id=qp.qp_id), reserved=False)

    def _on_send(self, conn: ConnState, f, payload, now: float) -> None:
        c = self.counters
        msn = f[5]
        st = conn.untagged
        if st is not None and st.msn != msn:
            if not msn_newer(msn, st.msn):
                c.stale_fragment += 1
                return
            # a newer message claims the head receive buffer; the old one is lost
            conn.untagged = None
            self._drop_incomplete(conn, st)
            c.reassembly_evictions += 1
            st = None
        if st is None:
            last = conn.last_untagged
            if last is not None and not msn_newer(msn, last):
                c.stale_fragment += 1
                return
            msg_len = f[7]
            qp = conn.qp
            if not qp.recv_queue:
                c.recv_no_buffer += 1
                return
            wr = qp.recv_queue[0]
            if wr.length < msg_len:
                c.recv_too_small += 1
                return
            conn.last_untagged = msn
            region = self._regions.get(wr.stag)
            deadline = now + self.config.reassembly_timeout
            st = ReassemblyState(msn, _SEND, msg_len, region.view, wr.offset, region, deadline,
                                 recv_wr=wr)
            conn.untagged = st
            self._arm(deadline)
        elif f[7] != st.msg_len:
            conn.untagged = None
            self._drop_incomplete(conn, st)
            c.bounds_violation += 1
            return
        self._place(st, f[6], payload)
        if st.coverage.total == st.msg_len:
            conn.untagged = None
            qp = conn.qp
            wr = qp.recv_queue.popleft()
            with self._lock:
                st.region.inflight -= 1
            self._deliver(st)
            self._complete(qp.recv_cq, WorkCompletion(
                wr.wr_id, WROpcode.RECV, WCStatus.SUCCESS, st.msg_len, msn=msn, qp_id=qp.qp_id))

    def _on_read_req(self, conn: ConnState, f, payload) -> None:
        c = self.counters
        if not (f[6] == 0 and len(payload) == f[7]):
            c.malformed += 1
            return
        try:
            req = wire.ReadRequestPayload.decode(payload)
        except wire.MalformedDatagram:
            c.malformed += 1
            return
        if not self.config.read_enabled:
            c.read_disabled += 1
            return
        region = self._regions.get(req.source_stag)
        if region is None:
            c.remote_invalid_stag += 1
            return
        if not region.access & Access.REMOTE_READ:
            c.unauthorized += 1
            return
        if not region.contains(req.source_offset, req.read_len) or req.sink_offset + req.read_len > U32:
            c.bounds_violation += 1
            return
        with self._lock:
            region.inflight += 1
        c.read_requests_served += 1
        source = region.view[req.source_offset:req.source_offset + req.read_len]
        self._txq.append(TxJob(conn.qp, None, None, req.read_id, source, region, req.read_len,
                               req.sink_stag, req.sink_offset))

    def _on_read_resp(self, conn: ConnState, f, payload) -> None:
        c = self.counters
        rs = conn.reads.get(f[5])
        if rs is None:
            c.stale_read_response += 1
            return
        if f[7] != rs.length or f[8] != rs.wr.stag or f[9] != rs.sink_offset:
            c.bounds_violation += 1
            return
        self._place(rs, f[6], payload)
        if rs.coverage.total == rs.length:
            del conn.reads[rs.read_id]
            self._deliver(rs)
            self._finish_read(conn, rs, WCStatus.SUCCESS, rs.length)

