import hashlib

import pytest

from conftest import inject, pattern, raw_fragments
from ucrdma import (
    Access, CompletionQueue, Endpoint, EndpointConfig, ImpairmentSpec, QPState, WCStatus,
    WorkCompletion, WorkRequest, WROpcode, poll_cq,
)
from ucrdma.verbs import (
    BadStateError, CQFullError, InvalidRangeError, ReadDisabledError, RegionInUseError, VerbsError,
)
from ucrdma.wire import DatagramHeader, Flags, Opcode, encode_header

DROP_ALL = ImpairmentSpec(loss_prob=1.0, seed=0)
READ_CFG = EndpointConfig(read_enabled=True)


def test_register_8k_region():
    with Endpoint() as ep:
        mr = ep.register_memory(bytearray(8192), Access.REMOTE_WRITE)
        assert mr.length == 8192 and mr.stag != 0 and mr.access == Access.REMOTE_WRITE


def test_register_empty_buffer_fails():
    with Endpoint() as ep, pytest.raises(InvalidRangeError):
        ep.register_memory(bytearray(0))


def test_register_readonly_buffer_fails():
    with Endpoint() as ep, pytest.raises(InvalidRangeError):
        ep.register_memory(b"immutable")


def test_register_after_close_fails():
    ep = Endpoint()
    ep.close()
    with pytest.raises(BadStateError):
        ep.register_memory(bytearray(8))


def test_stags_are_unique():
    with Endpoint() as ep:
        stags = {ep.register_memory(bytearray(4)).stag for _ in range(1000)}
        assert len(stags) == 1000 and 0 not in stags


def test_double_deregister_fails():
    with Endpoint() as ep:
        mr = ep.register_memory(bytearray(4))
        ep.deregister_memory(mr)
        with pytest.raises(VerbsError):
            ep.deregister_memory(mr)


def test_deregister_with_inflight_send_fails(pair):
    tr = pair.server.register_memory(bytearray(64), Access.REMOTE_WRITE)
    src = pair.client.register_memory(bytearray(64))
    pair.cqp.post_send(WorkRequest.write(1, src, tr.stag))
    with pytest.raises(RegionInUseError):
        pair.client.deregister_memory(src)
    pair.pump()
    pair.client.deregister_memory(src)


def test_deregister_with_posted_recv_fails(pair):
    buf = pair.server.register_memory(bytearray(64))
    pair.sqp.post_recv(WorkRequest.recv(1, buf))
    with pytest.raises(RegionInUseError):
        pair.server.deregister_memory(buf)


def test_work_request_validation():
    with pytest.raises(ValueError):
        WorkRequest(1, WROpcode.WRITE, 1, 0, 8)  # tagged without remote
    with pytest.raises(ValueError):
        WorkRequest(1, WROpcode.SEND, 1, 0, 8, remote_stag=3)
    with pytest.raises(InvalidRangeError):
        WorkRequest(1, WROpcode.SEND, 1, 0, -1)
    with pytest.raises(ValueError):
        WorkRequest(2**64, WROpcode.SEND, 1)
    with pytest.raises(ValueError):
        WorkRequest(1, WROpcode.WRITE_IMM, 1, 0, 1, remote_stag=2, imm=2**32)


def test_post_send_on_idle_qp_is_bad_state():
    with Endpoint() as ep:
        qp = ep.create_qp()
        mr = ep.register_memory(bytearray(8))
        with pytest.raises(BadStateError):
            qp.post_send(WorkRequest.send(1, mr))


def test_post_send_outside_region_is_invalid(pair):
    src = pair.client.register_memory(bytearray(100))
    with pytest.raises(InvalidRangeError):
        pair.cqp.post_send(WorkRequest(1, WROpcode.SEND, src.stag, 50, 51))
    with pytest.raises(InvalidRangeError):
        pair.cqp.post_send(WorkRequest(1, WROpcode.SEND, 0xDEAD, 0, 1))


def test_post_recv_as_send_rejected(pair):
    mr = pair.client.register_memory(bytearray(8))
    with pytest.raises(ValueError):
        pair.cqp.post_send(WorkRequest.recv(1, mr))
    with pytest.raises(ValueError):
        pair.cqp.post_recv(WorkRequest.send(1, mr))


def test_poll_empty_cq():
    assert poll_cq(CompletionQueue(4), 10) == []


def test_cq_reservation_fails_fast_when_full(make_pair):
    p = make_pair(EndpointConfig(cq_capacity=2))
    tr = p.server.register_memory(bytearray(8), Access.REMOTE_WRITE)
    src = p.client.register_memory(bytearray(8))
    p.cqp.post_send(WorkRequest.write(1, src, tr.stag))
    p.cqp.post_send(WorkRequest.write(2, src, tr.stag))
    with pytest.raises(CQFullError):
        p.cqp.post_send(WorkRequest.write(3, src, tr.stag))
    p.pump()
    assert [w.wr_id for w in p.cqp.send_cq.poll(5)] == [1, 2]
    p.cqp.post_send(WorkRequest.write(3, src, tr.stag))


def test_cq_unreserved_push_overflows():
    cq = CompletionQueue(1)
    wc = WorkCompletion(0, WROpcode.RECV_WRITE_IMM, WCStatus.SUCCESS)
    assert cq.push(wc, reserved=False)
    assert not cq.push(wc, reserved=False)
    assert cq.overflows == 1 and len(cq) == 1


def test_send_completions_in_posting_order(pair):
    tr = pair.server.register_memory(bytearray(5000), Access.REMOTE_WRITE)
    src = pair.client.register_memory(pattern(5000))
    pair.sqp.post_recv(WorkRequest.recv(100, pair.server.register_memory(bytearray(5000))))
    ops = []
    for i in range(40):
        kind = i % 3
        if kind == 0:
            wr = WorkRequest.write(i, src, tr.stag, length=i * 100)
        elif kind == 1:
            wr = WorkRequest.write(i, src, tr.stag, length=i * 100, imm=i)
        else:
            wr = WorkRequest.send(i, src, length=i)
        pair.cqp.post_send(wr)
        ops.append(wr)
    pair.pump()
    wcs = pair.cqp.send_cq.poll(100)
    assert [w.wr_id for w in wcs] == list(range(40))
    assert [w.msn for w in wcs] == list(range(40))
    assert all(w.status is WCStatus.SUCCESS for w in wcs)
    assert all(w.byte_len == wr.length for w, wr in zip(wcs, ops))


def test_write_imm_notification(pair):
    target = bytearray(8192)
    tr = pair.server.register_memory(target, Access.REMOTE_WRITE)
    data = pattern(8192, 8)
    src = pair.client.register_memory(data)
    pair.cqp.post_send(WorkRequest.write(1, src, tr.stag, imm=0xCAFE))
    pair.pump()
    [wc] = pair.sqp.recv_cq.poll(5)
    assert wc.opcode is WROpcode.RECV_WRITE_IMM and wc.imm_valid and wc.imm == 0xCAFE
    assert wc.byte_len == 8192 and target == data


def test_plain_write_is_invisible_to_target(pair):
    target = bytearray(100)
    tr = pair.server.register_memory(target, Access.REMOTE_WRITE)
    src = pair.client.register_memory(pattern(100, 2))
    pair.cqp.post_send(WorkRequest.write(1, src, tr.stag))
    pair.pump()
    assert pair.sqp.recv_cq.poll(5) == []
    assert target == src.view


def test_recv_buffer_reused_after_lost_send(pair):
    rbuf = bytearray(5000)
    pair.sqp.post_recv(WorkRequest.recv(7, pair.server.register_memory(rbuf)))
    first = pattern(4000, 1)
    second = pattern(3000, 2)
    s1 = pair.client.register_memory(first)
    s2 = pair.client.register_memory(second)
    lost = raw_fragments(pair, WorkRequest.send(1, s1), 0)
    assert len(lost) == 3
    inject(pair, [lost[0], lost[2]])
    inject(pair, raw_fragments(pair, WorkRequest.send(2, s2), 1))
    [wc] = pair.sqp.recv_cq.poll(5)
    assert wc.wr_id == 7 and wc.opcode is WROpcode.RECV and wc.byte_len == 3000
    assert not wc.imm_valid
    assert hashlib.sha256(rbuf[:3000]).digest() == hashlib.sha256(second).digest()
    assert pair.server.counters.messages_dropped_incomplete == 1


def test_send_without_recv_buffer_is_dropped(pair):
    src = pair.client.register_memory(pattern(100))
    pair.cqp.post_send(WorkRequest.send(1, src))
    pair.pump()
    assert pair.server.counters.recv_no_buffer == 1
    assert pair.cqp.send_cq.poll(1)[0].status is WCStatus.SUCCESS


def test_send_larger_than_recv_buffer_is_dropped(pair):
    pair.sqp.post_recv(WorkRequest.recv(1, pair.server.register_memory(bytearray(10))))
    src = pair.client.register_memory(pattern(100))
    pair.cqp.post_send(WorkRequest.send(1, src))
    pair.pump()
    assert pair.server.counters.recv_too_small == 1
    assert pair.sqp.recv_cq.poll(5) == []
    assert len(pair.sqp.recv_queue) == 1


def test_recv_completions_consume_buffers_in_order(pair):
    bufs = [bytearray(2000) for _ in range(3)]
    for i, b in enumerate(bufs):
        pair.sqp.post_recv(WorkRequest.recv(i, pair.server.register_memory(b)))
    msgs = [pattern(500 * (i + 1), 10 + i) for i in range(3)]
    for i, m in enumerate(msgs):
        pair.cqp.post_send(WorkRequest.send(i, pair.client.register_memory(m)))
    pair.pump()
    wcs = pair.sqp.recv_cq.poll(5)
    assert [w.wr_id for w in wcs] == [0, 1, 2]
    for w, b, m in zip(wcs, bufs, msgs):
        assert b[:w.byte_len] == m


def test_read_requires_enabled_config(pair):
    src = pair.client.register_memory(bytearray(8))
    with pytest.raises(ReadDisabledError):
        pair.cqp.post_send(WorkRequest.read(1, src, 1234))


def test_read_disabled_responder_counts(make_pair):
    p = make_pair(READ_CFG, server_config=EndpointConfig())
    src = p.client.register_memory(bytearray(8))
    with pytest.raises(ReadDisabledError):  # the peer did not advertise reads
        p.cqp.post_send(WorkRequest.read(1, src, 1234))


def test_read_64k_success(make_pair):
    p = make_pair(READ_CFG)
    data = pattern(65536, 6)
    remote = p.server.register_memory(data, Access.REMOTE_READ)
    sink = bytearray(65536)
    p.cqp.post_send(WorkRequest.read(9, p.client.register_memory(sink), remote.stag))
    p.pump()
    [wc] = p.cqp.send_cq.poll(5)
    assert wc.status is WCStatus.SUCCESS and wc.opcode is WROpcode.READ and wc.byte_len == 65536
    assert sink == data
    assert p.client.counters.payload_copy_bytes == 65536


def test_read_8k_response_uses_six_datagrams(make_pair):
    p = make_pair(READ_CFG)
    remote = p.server.register_memory(pattern(8192), Access.REMOTE_READ)
    before = p.server.counters.datagrams_tx
    p.cqp.post_send(WorkRequest.read(1, p.client.register_memory(bytearray(8192)), remote.stag))
    p.pump()
    assert p.server.counters.datagrams_tx - before == 6
    assert p.server.counters.read_requests_served == 1


@pytest.mark.parametrize("access,counter", [(Access.REMOTE_WRITE, "unauthorized"), (None, "remote_invalid_stag")])
def test_read_responder_rejections(make_pair, access, counter):
    p = make_pair(EndpointConfig(read_enabled=True, read_timeout=0.2))
    stag = 0xABCD
    if access is not None:
        stag = p.server.register_memory(bytearray(64), access).stag
    p.cqp.post_send(WorkRequest.read(1, p.client.register_memory(bytearray(64)), stag))
    p.pump()
    assert getattr(p.server.counters, counter) == 1
    assert p.cqp.send_cq.poll(1)[0].status is WCStatus.READ_TIMEOUT


def test_read_out_of_bounds(make_pair):
    p = make_pair(EndpointConfig(read_enabled=True, read_timeout=0.2))
    remote = p.server.register_memory(bytearray(64), Access.REMOTE_READ)
    p.cqp.post_send(WorkRequest.read(1, p.client.register_memory(bytearray(64)), remote.stag, 1))
    p.pump()
    assert p.server.counters.bounds_violation == 1


def test_lost_read_without_timer_stalls(make_pair):
    p = make_pair(READ_CFG)
    remote = p.server.register_memory(pattern(4096), Access.REMOTE_READ)
    p.client.set_impairment(DROP_ALL)
    p.cqp.post_send(WorkRequest.read(1, p.client.register_memory(bytearray(4096)), remote.stag))
    p.pump()
    p.client.set_impairment(None)
    p.clock.advance_to(p.clock() + 3600)
    p.pump()
    assert p.cqp.send_cq.poll(5) == []
    assert p.cqp.state is QPState.CONNECTED


def test_lost_read_with_timer_times_out(make_pair):
    p = make_pair(EndpointConfig(read_enabled=True, read_timeout=0.2))
    data = pattern(4096, 1)
    remote = p.server.register_memory(data, Access.REMOTE_READ)
    sink = bytearray(4096)
    mr = p.client.register_memory(sink)
    p.client.set_impairment(DROP_ALL)
    p.cqp.post_send(WorkRequest.read(1, mr, remote.stag))
    p.pump()
    p.client.set_impairment(None)
    p.cqp.post_send(WorkRequest.read(2, mr, remote.stag))
    t0 = p.clock()
    p.pump()
    wcs = p.cqp.send_cq.poll(5)
    by_id = {w.wr_id: w.status for w in wcs}
    assert by_id == {1: WCStatus.READ_TIMEOUT, 2: WCStatus.SUCCESS}
    assert p.clock() - t0 >= 0.2 - 1e-9
    assert p.client.counters.read_timeouts == 1 and sink == data


def test_late_read_response_is_stale(make_pair):
    p = make_pair(EndpointConfig(read_enabled=True, read_timeout=0.2))
    remote = p.server.register_memory(pattern(100), Access.REMOTE_READ)
    mr = p.client.register_memory(bytearray(100))
    p.server.set_impairment(DROP_ALL)
    p.cqp.post_send(WorkRequest.read(1, mr, remote.stag))
    p.pump()
    assert p.cqp.send_cq.poll(1)[0].status is WCStatus.READ_TIMEOUT
    # replay a response for the expired read
    h = DatagramHeader(Opcode.READ_RESP, Flags.FIRST | Flags.LAST, conn_id=p.cqp.qp_id, msn=1,
                       msg_len=100, stag=mr.stag)
    p.server.sock.sendto(encode_header(h, 100) + bytes(100), p.client.address)
    p.client.progress()
    assert p.client.counters.stale_read_response == 1
    assert p.cqp.send_cq.poll(1) == []
