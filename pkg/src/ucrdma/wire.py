"""Datagram header and control payload codec.

Layout (network byte order, 32 bytes)::

    0   version (u8, 0x01)
    1   opcode (u8)
    2   flags (u8: bit0 LAST, bit1 FIRST)
    3   reserved (u8, 0)
    4   conn_id (u32)
    8   msn (u32)
    12  frag_offset (u32)
    16  msg_len (u32)
    20  stag (u32)
    24  tagged_offset (u32)
    28  imm (u32)

See docs/wire.md for the full contract.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass

VERSION = 0x01

HEADER = struct.Struct("!BBBBIIIIIII")
HEADER_SIZE = HEADER.size  # 32

# READ_REQ payload: source_stag, source_offset, sink_stag, sink_offset, read_len, read_id
READ_REQ = struct.Struct("!IQIQII")
# CONN_REQ / CONN_REP payload: proposer conn_id, feature bits
CONN_PAYLOAD = struct.Struct("!II")

FEATURE_READ = 0x1

DEFAULT_MAX_PAYLOAD = 1408
JUMBO_MAX_PAYLOAD = 8928

U32 = 0xFFFFFFFF
U64 = 0xFFFFFFFFFFFFFFFF


class Opcode(enum.IntEnum):
    SEND = 0
    WRITE = 1
    WRITE_IMM = 2
    READ_REQ = 3
    READ_RESP = 4
    CONN_REQ = 16
    CONN_REP = 17
    CONN_RTU = 18
    DISCONNECT = 19


TAGGED = frozenset({Opcode.WRITE, Opcode.WRITE_IMM, Opcode.READ_RESP})
CONTROL = frozenset({Opcode.CONN_REQ, Opcode.CONN_REP, Opcode.CONN_RTU, Opcode.DISCONNECT})
_KNOWN_OPCODES = frozenset(int(op) for op in Opcode)


class Flags(enum.IntFlag):
    NONE = 0
    LAST = 0x01
    FIRST = 0x02


_FIRST = int(Flags.FIRST)
_LAST = int(Flags.LAST)


class Malformed(str, enum.Enum):
    TOO_SHORT = "too_short"
    BAD_VERSION = "bad_version"
    BAD_OPCODE = "bad_opcode"
    INCONSISTENT_FLAGS = "inconsistent_flags"
    OVERFLOW = "overflow"


class EncodeError(ValueError):
    """Raised instead of emitting a header that violates the wire invariants."""


class MalformedDatagram(ValueError):
    def __init__(self, reason: Malformed, detail: str = ""):
        super().__init__(f"{reason.value}: {detail}" if detail else reason.value)
        self.reason = reason


@dataclass(frozen=True, slots=True)
class DatagramHeader:
    opcode: Opcode
    flags: Flags = Flags.NONE
    conn_id: int = 0
    msn: int = 0
    frag_offset: int = 0
    msg_len: int = 0
    stag: int = 0
    tagged_offset: int = 0
    imm: int = 0
    version: int = VERSION

    @property
    def first(self) -> bool:
        return bool(self.flags & Flags.FIRST)

    @property
    def last(self) -> bool:
        return bool(self.flags & Flags.LAST)

    @property
    def payload_len(self) -> int:
        """Payload length implied by the flags: exact for LAST fragments, unknown (-1) otherwise."""
        return self.msg_len - self.frag_offset if self.last else -1


def fragment_flags(frag_offset: int, payload_len: int, msg_len: int) -> Flags:
    flags = Flags.NONE
    if frag_offset == 0:
        flags |= Flags.FIRST
    if frag_offset + payload_len == msg_len:
        flags |= Flags.LAST
    return flags


def _check_extent(flags: int, frag_offset: int, payload_len: int, msg_len: int) -> Malformed | None:
    end = frag_offset + payload_len
    if end > msg_len:
        return Malformed.OVERFLOW
    if (flags & _FIRST != 0) != (frag_offset == 0) or (flags & _LAST != 0) != (end == msg_len):
        return Malformed.INCONSISTENT_FLAGS
    return None


def encode_header(h: DatagramHeader, payload_len: int | None = None) -> bytes:
    """Encode ``h`` into its 32-byte wire image.

    When ``payload_len`` is given, the FIRST/LAST flags and the fragment
    extent are checked against it as well.
    """
    if h.version != VERSION:
        raise EncodeError(f"version must be {VERSION:#x}")
    if int(h.opcode) not in _KNOWN_OPCODES:
        raise EncodeError(f"unknown opcode {h.opcode!r}")
    if int(h.flags) & ~(Flags.FIRST | Flags.LAST):
        raise EncodeError(f"undefined flag bits {int(h.flags):#x}")
    for name in ("conn_id", "msn", "frag_offset", "msg_len", "stag", "tagged_offset", "imm"):
        value = getattr(h, name)
        if not 0 <= value <= U32:
            raise EncodeError(f"{name}={value} does not fit in 32 bits")
    if h.frag_offset > h.msg_len:
        raise EncodeError("frag_offset beyond msg_len")
    if bool(h.flags & Flags.FIRST) != (h.frag_offset == 0):
        raise EncodeError("FIRST must be set iff frag_offset == 0")
    if h.opcode not in TAGGED and (h.stag or h.tagged_offset):
        raise EncodeError(f"{h.opcode.name} carries no tagged buffer coordinates")
    if h.opcode is not Opcode.WRITE_IMM and h.imm:
        raise EncodeError("imm is only carried by WRITE_IMM")
    if payload_len is not None:
        bad = _check_extent(int(h.flags), h.frag_offset, payload_len, h.msg_len)
        if bad is not None:
            raise EncodeError(f"{bad.value} for payload of {payload_len} bytes")
    return HEADER.pack(
        h.version, int(h.opcode), int(h.flags), 0, h.conn_id, h.msn,
        h.frag_offset, h.msg_len, h.stag, h.tagged_offset, h.imm,
    )


def decode_fields(buf, length: int) -> tuple:
    """Validate and unpack a raw header without building a dataclass.

    ``buf`` holds a datagram of ``length`` bytes. Returns the raw field tuple
    ``(version, opcode, flags, reserved, conn_id, msn, frag_offset, msg_len,
    stag, tagged_offset, imm)``; raises MalformedDatagram otherwise.
    """
    if length < HEADER_SIZE:
        raise MalformedDatagram(Malformed.TOO_SHORT, f"{length} bytes")
    fields = HEADER.unpack_from(buf, 0)
    if fields[0] != VERSION:
        raise MalformedDatagram(Malformed.BAD_VERSION, f"{fields[0]:#x}")
    if fields[1] not in _KNOWN_OPCODES:
        raise MalformedDatagram(Malformed.BAD_OPCODE, str(fields[1]))
    flags = fields[2]
    if fields[3] != 0 or flags & ~0x03:
        raise MalformedDatagram(Malformed.INCONSISTENT_FLAGS, "reserved bits set")
    bad = _check_extent(flags, fields[6], length - HEADER_SIZE, fields[7])
    if bad is not None:
        raise MalformedDatagram(bad)
    return fields


def decode_header(b) -> DatagramHeader:
    """Decode the header at the start of datagram ``b``.

    The payload is everything after the first 32 bytes; its length is used
    to check the FIRST/LAST flags and that the fragment stays inside msg_len.
    """
    f = decode_fields(b, len(b))
    return DatagramHeader(
        opcode=Opcode(f[1]), flags=Flags(f[2]), conn_id=f[4], msn=f[5],
        frag_offset=f[6], msg_len=f[7], stag=f[8], tagged_offset=f[9], imm=f[10],
        version=f[0],
    )


@dataclass(frozen=True, slots=True)
class ReadRequestPayload:
    source_stag: int
    source_offset: int
    sink_stag: int
    sink_offset: int
    read_len: int
    read_id: int

    def encode(self) -> bytes:
        if self.read_len < 1:
            raise EncodeError("read_len must be >= 1")
        try:
            return READ_REQ.pack(self.source_stag, self.source_offset, self.sink_stag,
                                 self.sink_offset, self.read_len, self.read_id)
        except struct.error as exc:
            raise EncodeError(str(exc)) from None

    @classmethod
    def decode(cls, payload) -> ReadRequestPayload:
        if len(payload) != READ_REQ.size:
            raise MalformedDatagram(Malformed.OVERFLOW, f"READ_REQ payload of {len(payload)} bytes")
        req = cls(*READ_REQ.unpack_from(payload, 0))
        if req.read_len < 1:
            raise MalformedDatagram(Malformed.OVERFLOW, "read_len 0")
        return req


def encode_conn_payload(conn_id: int, features: int) -> bytes:
    return CONN_PAYLOAD.pack(conn_id, features)


def decode_conn_payload(payload) -> tuple[int, int]:
    if len(payload) != CONN_PAYLOAD.size:
        raise MalformedDatagram(Malformed.OVERFLOW, f"connection payload of {len(payload)} bytes")
    return CONN_PAYLOAD.unpack_from(payload, 0)


def control_header(opcode: Opcode, conn_id: int, payload_len: int) -> bytes:
    """Single-datagram header for a control message (CONN_*, DISCONNECT, READ_REQ)."""
    return HEADER.pack(VERSION, int(opcode), int(Flags.FIRST | Flags.LAST), 0, conn_id,
                       0, 0, payload_len, 0, 0, 0)
