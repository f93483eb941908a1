import random
import struct

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ucrdma import wire
from ucrdma.wire import (
    DatagramHeader,
    EncodeError,
    Flags,
    Malformed,
    MalformedDatagram,
    Opcode,
    ReadRequestPayload,
    decode_header,
    encode_header,
)

# version, opcode, flags, reserved | conn_id | msn | frag_offset | msg_len | stag | tagged_offset | imm
EXAMPLE_WRITE = bytes.fromhex(
    "01010300" "00000007" "00000000" "00000000" "00000580" "0000002a" "00000000" "00000000"
)


def test_header_is_32_bytes():
    assert wire.HEADER_SIZE == 32


def test_encode_write_example_matches_hand_layout():
    h = DatagramHeader(Opcode.WRITE, Flags.FIRST | Flags.LAST, conn_id=7, msn=0,
                       frag_offset=0, msg_len=1408, stag=42)
    b = encode_header(h, payload_len=1408)
    assert b[:4] == b"\x01\x01\x03\x00"
    assert b == EXAMPLE_WRITE


def test_send_zero_fields_leave_conn_id_zero():
    b = encode_header(DatagramHeader(Opcode.SEND, Flags.FIRST | Flags.LAST), payload_len=0)
    assert b[4:8] == b"\0\0\0\0"
    assert len(b) == 32


def test_decode_middle_fragment():
    h = DatagramHeader(Opcode.WRITE, Flags.NONE, conn_id=7, msn=3, frag_offset=1408,
                       msg_len=8192, stag=42, tagged_offset=0)
    dg = encode_header(h, payload_len=1408) + bytes(1408)
    got = decode_header(dg)
    assert got == h
    assert not got.last and not got.first


@pytest.mark.parametrize("n", [0, 1, 31])
def test_too_short(n):
    with pytest.raises(MalformedDatagram) as exc:
        decode_header(EXAMPLE_WRITE[:n])
    assert exc.value.reason is Malformed.TOO_SHORT


def test_bad_version():
    dg = b"\x02" + EXAMPLE_WRITE[1:] + bytes(1408)
    with pytest.raises(MalformedDatagram) as exc:
        decode_header(dg)
    assert exc.value.reason is Malformed.BAD_VERSION


@pytest.mark.parametrize("op", [5, 15, 20, 255])
def test_bad_opcode(op):
    dg = EXAMPLE_WRITE[:1] + bytes([op]) + EXAMPLE_WRITE[2:] + bytes(1408)
    with pytest.raises(MalformedDatagram) as exc:
        decode_header(dg)
    assert exc.value.reason is Malformed.BAD_OPCODE


@pytest.mark.parametrize("flags", [0x00, 0x01, 0x02, 0x07, 0x83])
def test_inconsistent_flags(flags):
    # single-fragment message needs exactly FIRST|LAST
    dg = EXAMPLE_WRITE[:2] + bytes([flags]) + EXAMPLE_WRITE[3:] + bytes(1408)
    with pytest.raises(MalformedDatagram) as exc:
        decode_header(dg)
    assert exc.value.reason is Malformed.INCONSISTENT_FLAGS


def test_reserved_byte_must_be_zero():
    dg = EXAMPLE_WRITE[:3] + b"\x01" + EXAMPLE_WRITE[4:] + bytes(1408)
    with pytest.raises(MalformedDatagram) as exc:
        decode_header(dg)
    assert exc.value.reason is Malformed.INCONSISTENT_FLAGS


def test_payload_longer_than_message_overflows():
    with pytest.raises(MalformedDatagram) as exc:
        decode_header(EXAMPLE_WRITE + bytes(1409))
    assert exc.value.reason is Malformed.OVERFLOW


def test_fragment_beyond_message_overflows():
    h = wire.HEADER.pack(1, 1, 0, 0, 7, 0, 8000, 8192, 42, 0, 0)
    with pytest.raises(MalformedDatagram) as exc:
        decode_header(h + bytes(1408))
    assert exc.value.reason is Malformed.OVERFLOW


def test_short_payload_without_last_is_accepted_as_middle():
    h = wire.HEADER.pack(1, 1, 0, 0, 7, 0, 1408, 8192, 42, 0, 0)
    assert decode_header(h + bytes(100)).frag_offset == 1408


def test_decode_reads_only_the_given_buffer():
    big = bytearray(EXAMPLE_WRITE + bytes(1408) + b"trailing")
    view = memoryview(big)[:32 + 1408]
    assert decode_header(view).msg_len == 1408
    with pytest.raises(MalformedDatagram):
        decode_header(memoryview(big)[:32 + 1407])  # LAST set but payload short


@pytest.mark.parametrize("bad", [
    dict(opcode=Opcode.WRITE, flags=Flags.LAST, msg_len=10),                # FIRST missing at offset 0
    dict(opcode=Opcode.WRITE, flags=Flags.FIRST | Flags.LAST, frag_offset=5, msg_len=10),
    dict(opcode=Opcode.SEND, flags=Flags.FIRST | Flags.LAST, stag=3),      # untagged with stag
    dict(opcode=Opcode.WRITE, flags=Flags.FIRST | Flags.LAST, imm=3),      # imm outside WRITE_IMM
    dict(opcode=Opcode.WRITE, flags=Flags.FIRST | Flags.LAST, msn=2**32),
    dict(opcode=Opcode.WRITE, flags=Flags(0x04) | Flags.FIRST),
])
def test_encode_refuses_invalid_headers(bad):
    with pytest.raises(EncodeError):
        encode_header(DatagramHeader(**bad))


def test_encode_checks_extent_against_payload():
    h = DatagramHeader(Opcode.WRITE, Flags.FIRST, msg_len=100)
    encode_header(h, payload_len=50)
    with pytest.raises(EncodeError):
        encode_header(h, payload_len=100)  # would be the last fragment, LAST unset
    with pytest.raises(EncodeError):
        encode_header(h, payload_len=101)


def random_valid(rng: random.Random) -> tuple[DatagramHeader, int]:
    op = rng.choice(list(Opcode))
    msg_len = rng.choice([0, 1, rng.randrange(2**32)])
    frag = rng.choice([0, rng.randrange(msg_len + 1)]) if msg_len else 0
    payload = rng.randrange(min(msg_len - frag, 9000) + 1)
    if rng.random() < 0.3:
        payload = min(msg_len - frag, 9000)
    tagged = op in wire.TAGGED
    h = DatagramHeader(
        opcode=op,
        flags=wire.fragment_flags(frag, payload, msg_len),
        conn_id=rng.randrange(2**32),
        msn=rng.randrange(2**32),
        frag_offset=frag,
        msg_len=msg_len,
        stag=rng.randrange(2**32) if tagged else 0,
        tagged_offset=rng.randrange(2**32) if tagged else 0,
        imm=rng.randrange(2**32) if op is Opcode.WRITE_IMM else 0,
    )
    return h, payload


def test_round_trip_10k_random_headers():
    rng = random.Random(424242)
    for _ in range(10_000):
        h, n = random_valid(rng)
        b = encode_header(h, payload_len=n)
        assert len(b) == 32
        assert decode_header(b + bytes(n)) == h
        assert encode_header(decode_header(b + bytes(n))) == b


@settings(max_examples=300)
@given(st.binary(min_size=0, max_size=80))
def test_decode_arbitrary_bytes_never_crashes(data):
    try:
        h = decode_header(data)
    except MalformedDatagram as exc:
        assert isinstance(exc.reason, Malformed)
    else:
        assert h.frag_offset + len(data) - 32 <= h.msg_len


@given(st.integers(0, 2**32 - 1), st.integers(0, 2**64 - 1), st.integers(0, 2**32 - 1),
       st.integers(0, 2**64 - 1), st.integers(1, 2**32 - 1), st.integers(0, 2**32 - 1))
def test_read_request_round_trip(a, b, c, d, e, f):
    req = ReadRequestPayload(a, b, c, d, e, f)
    assert ReadRequestPayload.decode(req.encode()) == req


def test_read_request_rejects_zero_length():
    with pytest.raises(EncodeError):
        ReadRequestPayload(1, 0, 2, 0, 0, 1).encode()
    raw = struct.pack("!IQIQII", 1, 0, 2, 0, 0, 1)
    with pytest.raises(MalformedDatagram):
        ReadRequestPayload.decode(raw)
