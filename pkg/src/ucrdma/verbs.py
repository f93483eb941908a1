"""Application-facing RDMA objects with unreliable-connected semantics.

Send-side completions report *transmission*: SUCCESS on a SEND/WRITE/WRITE_IMM
means every fragment was handed to the datagram socket, not that the peer got
it. Inbound plain WRITEs are invisible to the target; only WRITE_IMM produces
a completion there, and only once every byte of the message was placed.
"""

from __future__ import annotations

import enum
import threading
from collections import deque
from dataclasses import dataclass, field
from typing import TYPE_CHECKING

if TYPE_CHECKING:
    from .engine import Endpoint

DEFAULT_CQ_CAPACITY = 4096
MAX_REGION = 0xFFFFFFFF  # tagged offsets are 32-bit on the wire


class VerbsError(Exception):
    pass


class BadStateError(VerbsError):
    pass


class InvalidRangeError(VerbsError):
    pass


class RegionInUseError(VerbsError):
    pass


class CQFullError(VerbsError):
    pass


class ReadDisabledError(VerbsError):
    pass


class ReadLimitError(VerbsError):
    pass


class Access(enum.IntFlag):
    LOCAL = 0x1
    REMOTE_WRITE = 0x2
    REMOTE_READ = 0x4


class WROpcode(enum.IntEnum):
    SEND = 0
    WRITE = 1
    WRITE_IMM = 2
    READ = 3
    RECV = 4
    # completion-only: inbound WRITE_IMM fully placed at the target
    RECV_WRITE_IMM = 5


TAGGED_WR = frozenset({WROpcode.WRITE, WROpcode.WRITE_IMM, WROpcode.READ})


class WCStatus(enum.Enum):
    SUCCESS = "success"
    FLUSHED = "flushed"
    LOCAL_ERROR = "local_error"
    READ_TIMEOUT = "read_timeout"


class QPState(enum.Enum):
    IDLE = "idle"
    CONNECTING = "connecting"
    CONNECTED = "connected"
    ERROR = "error"
    CLOSED = "closed"


class Service(enum.Enum):
    UNRELIABLE_CONNECTED = "uc"


class MemoryRegion:
    """A registered buffer addressable by the peer through its steering tag."""

    def __init__(self, endpoint: Endpoint, buffer, access: Access, stag: int):
        view = memoryview(buffer)
        if view.readonly:
            raise InvalidRangeError("registered buffers must be writable")
        self.endpoint = endpoint
        self.view = view.cast("B")
        self.length = self.view.nbytes
        self.access = Access(access)
        self.stag = stag
        self.inflight = 0
        self.live = True

    @property
    def buffer(self) -> memoryview:
        return self.view

    def contains(self, offset: int, length: int) -> bool:
        return offset >= 0 and length >= 0 and offset + length <= self.length

    def __repr__(self) -> str:
        return f"MemoryRegion(stag={self.stag:#x}, length={self.length}, access={self.access!r})"


@dataclass(frozen=True)
class WorkRequest:
    wr_id: int
    opcode: WROpcode
    stag: int = 0
    offset: int = 0
    length: int = 0
    remote_stag: int | None = None
    remote_offset: int = 0
    imm: int = 0

    def __post_init__(self):
        if not 0 <= self.wr_id < 2**64:
            raise ValueError("wr_id must be an unsigned 64-bit value")
        if self.length < 0 or self.offset < 0:
            raise InvalidRangeError("negative local range")
        tagged = self.opcode in TAGGED_WR
        if tagged != (self.remote_stag is not None):
            raise ValueError(f"{self.opcode.name}: remote target required iff opcode is tagged")
        if self.opcode is WROpcode.READ and self.length < 1:
            raise InvalidRangeError("READ length must be >= 1")
        if not 0 <= self.imm <= 0xFFFFFFFF:
            raise ValueError("imm must fit in 32 bits")

    @classmethod
    def send(cls, wr_id: int, region: MemoryRegion, offset: int = 0, length: int | None = None):
        return cls(wr_id, WROpcode.SEND, region.stag, offset, _span(region, offset, length))

    @classmethod
    def recv(cls, wr_id: int, region: MemoryRegion, offset: int = 0, length: int | None = None):
        return cls(wr_id, WROpcode.RECV, region.stag, offset, _span(region, offset, length))

    @classmethod
    def write(cls, wr_id: int, region: MemoryRegion, remote_stag: int, remote_offset: int = 0,
              offset: int = 0, length: int | None = None, imm: int | None = None):
        op = WROpcode.WRITE if imm is None else WROpcode.WRITE_IMM
        return cls(wr_id, op, region.stag, offset, _span(region, offset, length),
                   remote_stag, remote_offset, imm or 0)

    @classmethod
    def read(cls, wr_id: int, region: MemoryRegion, remote_stag: int, remote_offset: int = 0,
             offset: int = 0, length: int | None = None):
        return cls(wr_id, WROpcode.READ, region.stag, offset, _span(region, offset, length),
                   remote_stag, remote_offset)


def _span(region: MemoryRegion, offset: int, length: int | None) -> int:
    return region.length - offset if length is None else length


@dataclass
class WorkCompletion:
    wr_id: int
    opcode: WROpcode
    status: WCStatus
    byte_len: int = 0
    imm_valid: bool = False
    imm: int = 0
    msn: int = 0
    qp_id: int = 0


class CompletionQueue:
    """Bounded completion queue; single consumer.

    Capacity is reserved when a work request is posted, so a completion can
    never be lost for lack of space: posting fails with CQFullError instead.
    """

    def __init__(self, capacity: int = DEFAULT_CQ_CAPACITY):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._entries: deque[WorkCompletion] = deque()
        self._reserved = 0
        self._lock = threading.Lock()
        self._ready = threading.Condition(self._lock)
        self.overflows = 0

    def reserve(self) -> None:
        with self._lock:
            if self._reserved >= self.capacity:
                raise CQFullError(f"completion queue full ({self.capacity})")
            self._reserved += 1

    def release(self) -> None:
        with self._lock:
            self._reserved -= 1

    def push(self, wc: WorkCompletion, reserved: bool = True) -> bool:
        """Append a completion. Unreserved pushes (inbound notifications) may overflow."""
        with self._lock:
            if not reserved:
                if self._reserved >= self.capacity:
                    self.overflows += 1
                    return False
                self._reserved += 1
            self._entries.append(wc)
            self._ready.notify()
            return True

    def poll(self, max_entries: int = 1) -> list[WorkCompletion]:
        out = []
        with self._lock:
            while self._entries and len(out) < max_entries:
                out.append(self._entries.popleft())
            self._reserved -= len(out)
        return out

    def wait(self, timeout: float | None = None) -> bool:
        """Block until at least one completion is queued (threaded endpoints only)."""
        with self._lock:
            return self._ready.wait_for(lambda: bool(self._entries), timeout)

    def __len__(self) -> int:
        return len(self._entries)


def poll_cq(cq: CompletionQueue, max_entries: int = 1) -> list[WorkCompletion]:
    return cq.poll(max_entries)


@dataclass(eq=False)
class QueuePair:
    """One endpoint of an unreliable connection.

    Created through :meth:`Endpoint.create_qp`; the connection itself is
    driven by the endpoint's connection manager.
    """

    endpoint: Endpoint = field(repr=False)
    qp_id: int
    send_cq: CompletionQueue = field(repr=False)
    recv_cq: CompletionQueue = field(repr=False)
    service: Service = Service.UNRELIABLE_CONNECTED
    state: QPState = QPState.IDLE
    peer: tuple | None = None
    send_msn: int = 0
    remote_conn_id: int = 0
    error: str | None = None
    recv_queue: deque = field(default_factory=deque, repr=False)
    _post_lock: threading.Lock = field(default_factory=threading.Lock, repr=False)
    _state_change: threading.Condition = field(init=False, repr=False)

    def __post_init__(self):
        self._state_change = threading.Condition(threading.Lock())

    def _set_state(self, state: QPState, error: str | None = None) -> None:
        with self._state_change:
            self.state = state
            if error is not None:
                self.error = error
            self._state_change.notify_all()

    def wait_state(self, states, timeout: float | None = None) -> bool:
        with self._state_change:
            return self._state_change.wait_for(lambda: self.state in states, timeout)

    def connect(self, peer, timeout: float | None = None, wait: bool = True) -> QPState:
        return self.endpoint.connect(self, peer, timeout=timeout, wait=wait)

    def disconnect(self) -> None:
        self.endpoint.disconnect(self)

    def post_send(self, wr: WorkRequest) -> None:
        self.endpoint.post_send(self, wr)

    def post_recv(self, wr: WorkRequest) -> None:
        self.endpoint.post_recv(self, wr)
