"""Connection management over the same unreliable datagram socket.

Three-way exchange: CONN_REQ (client id) -> CONN_REP (server id) -> CONN_RTU.
REQ and REP are retransmitted until answered or the retry budget runs out;
RTU is resent whenever a duplicate REP shows the server missed it. Data
addressed to a server connection that is still waiting for its RTU counts as
the RTU. Nothing on the data path ever creates or tears down a connection.
"""

from __future__ import annotations

import enum
import math
import threading
from collections import deque
from dataclasses import dataclass
from typing import TYPE_CHECKING

from . import wire
from .verbs import BadStateError, CompletionQueue, QPState, QueuePair
from .wire import Opcode

if TYPE_CHECKING:
    from .engine import ConnState, Endpoint

_CONN_REQ = int(Opcode.CONN_REQ)
_CONN_REP = int(Opcode.CONN_REP)
_CONN_RTU = int(Opcode.CONN_RTU)
_DISCONNECT = int(Opcode.DISCONNECT)
_SINGLE = int(wire.Flags.FIRST | wire.Flags.LAST)


class CMState(enum.Enum):
    LISTENING = "listening"
    REQ_SENT = "req_sent"
    REP_SENT = "rep_sent"
    ESTABLISHED = "established"
    CLOSED = "closed"


@dataclass
class ConnectionRecord:
    local_id: int
    peer: tuple
    state: CMState
    remote_id: int = 0
    budget: int = 5
    interval: float = 0.2
    tries: int = 0
    next_retransmit: float = math.inf
    listener: Listener | None = None


class Listener:
    """Accepts inbound connections on an endpoint; each yields a new server-side queue pair."""

    def __init__(self, endpoint: Endpoint, on_request=None, send_cq=None, recv_cq=None,
                 backlog: int = 1024):
        self.endpoint = endpoint
        self.on_request = on_request
        self.send_cq: CompletionQueue | None = send_cq
        self.recv_cq: CompletionQueue | None = recv_cq
        self.backlog = backlog
        self.state = CMState.LISTENING
        self.pending = 0
        self._accepted: deque[QueuePair] = deque()
        self._lock = threading.Lock()

    @property
    def address(self) -> tuple:
        return self.endpoint.address

    def _push(self, qp: QueuePair) -> None:
        with self._lock:
            self._accepted.append(qp)

    def accept(self, timeout: float | None = None) -> QueuePair | None:
        """Return the next established queue pair, or None on timeout."""
        if not self.endpoint.wait_for(lambda: bool(self._accepted), timeout):
            return None
        with self._lock:
            return self._accepted.popleft()

    def close(self) -> None:
        self.state = CMState.CLOSED
        self.endpoint.cm.listener = None


class ConnectionManager:
    def __init__(self, endpoint: Endpoint):
        self.ep = endpoint
        self.listener: Listener | None = None
        self._by_peer: dict[tuple, ConnState] = {}
        self._closing: list[list] = []  # [peer, remote_id, remaining, next_time]

    @property
    def features(self) -> int:
        return wire.FEATURE_READ if self.ep.config.read_enabled else 0

    def listen(self, on_request=None, send_cq=None, recv_cq=None) -> Listener:
        if self.listener is not None:
            raise BadStateError("endpoint is already listening")
        self.listener = Listener(self.ep, on_request, send_cq, recv_cq, self.ep.config.listen_backlog)
        return self.listener

    def connect(self, qp: QueuePair, peer: tuple, now: float) -> None:
        with qp._post_lock:
            if qp.state is not QPState.IDLE:
                raise BadStateError(f"connect needs an idle queue pair, not {qp.state.value}")
            conn = self.ep._conns[qp.qp_id]
            cfg = self.ep.config
            qp.peer = peer
            conn.record = ConnectionRecord(qp.qp_id, peer, CMState.REQ_SENT,
                                           budget=cfg.cm_retries, interval=cfg.cm_interval)
            qp._set_state(QPState.CONNECTING)
        self._transmit(conn.record, now)

    def disconnect(self, qp: QueuePair, now: float) -> None:
        if qp.state is not QPState.CONNECTED:
            raise BadStateError(f"cannot disconnect a {qp.state.value} queue pair")
        conn = self.ep._conns[qp.qp_id]
        self.ep.send_control(Opcode.DISCONNECT, qp.remote_conn_id, b"", qp.peer)
        retries = self.ep.config.disconnect_retries
        if retries:
            nxt = now + self.ep.config.cm_interval
            self._closing.append([qp.peer, qp.remote_conn_id, retries, nxt])
            self.ep._arm(nxt)
        self._close(conn)

    def _close(self, conn: ConnState) -> None:
        rec = conn.record
        if rec is not None:
            rec.state = CMState.CLOSED
            self._by_peer.pop((rec.peer, rec.remote_id), None)
        self.ep._flush_qp(conn.qp, QPState.CLOSED)

    def _transmit(self, rec: ConnectionRecord, now: float) -> None:
        payload = wire.encode_conn_payload(rec.local_id, self.features)
        if rec.state is CMState.REQ_SENT:
            self.ep.send_control(Opcode.CONN_REQ, 0, payload, rec.peer)
        else:
            self.ep.send_control(Opcode.CONN_REP, rec.remote_id, payload, rec.peer)
        rec.tries += 1
        rec.next_retransmit = now + rec.interval
        self.ep._arm(rec.next_retransmit)

    def run_timers(self, now: float) -> None:
        ep = self.ep
        for conn in list(ep._conns.values()):
            rec = conn.record
            if rec is None or rec.state not in (CMState.REQ_SENT, CMState.REP_SENT):
                continue
            if rec.next_retransmit > now:
                ep._arm(rec.next_retransmit)
            elif rec.tries < rec.budget:
                self._transmit(rec, now)
            elif rec.state is CMState.REQ_SENT:
                rec.state = CMState.CLOSED
                ep.counters.connect_timeouts += 1
                ep._flush_qp(conn.qp, QPState.ERROR, "connect_timeout")
            else:
                rec.state = CMState.CLOSED
                ep.counters.accept_timeouts += 1
                self._by_peer.pop((rec.peer, rec.remote_id), None)
                if rec.listener is not None:
                    rec.listener.pending -= 1
                ep._flush_qp(conn.qp, QPState.ERROR, "accept_timeout")
                with ep._lock:
                    ep._conns.pop(conn.qp.qp_id, None)
        keep = []
        for entry in self._closing:
            peer, remote_id, remaining, nxt = entry
            if nxt <= now:
                ep.send_control(Opcode.DISCONNECT, remote_id, b"", peer)
                entry[2] -= 1
                entry[3] = now + ep.config.cm_interval
            if entry[2] > 0:
                keep.append(entry)
                ep._arm(entry[3])
        self._closing = keep

    # ------------------------------------------------------------- inbound

    def on_control(self, f, payload, addr: tuple, now: float) -> None:
        ep = self.ep
        c = ep.counters
        if f[2] != _SINGLE:
            c.bump("control_malformed")
            return
        op = f[1]
        if op == _CONN_REQ:
            self._on_req(f, payload, addr, now)
            return
        conn = ep._conns.get(f[4])
        if conn is None:
            c.unknown_conn += 1
            return
        qp = conn.qp
        if qp.peer != addr:
            c.peer_mismatch += 1
            return
        rec = conn.record
        if rec is None:
            c.bump("control_unexpected")
            return
        if op == _CONN_REP:
            try:
                server_id, features = wire.decode_conn_payload(payload)
            except wire.MalformedDatagram:
                c.bump("control_malformed")
                return
            if rec.state is CMState.REQ_SENT:
                if server_id == 0:
                    rec.state = CMState.CLOSED
                    c.conn_rejected += 1
                    ep._flush_qp(qp, QPState.ERROR, "rejected")
                    return
                rec.state = CMState.ESTABLISHED
                rec.remote_id = server_id
                rec.next_retransmit = math.inf
                qp.remote_conn_id = server_id
                conn.peer_features = features
                ep.send_control(Opcode.CONN_RTU, server_id, b"", addr)
                qp._set_state(QPState.CONNECTED)
            elif rec.state is CMState.ESTABLISHED and server_id == rec.remote_id:
                ep.send_control(Opcode.CONN_RTU, server_id, b"", addr)
        elif op == _CONN_RTU:
            if rec.state is CMState.REP_SENT:
                self._establish(conn)
        elif op == _DISCONNECT:
            if qp.state in (QPState.CONNECTED, QPState.CONNECTING) and rec.state is not CMState.CLOSED:
                self._close(conn)
        else:
            c.bump("control_unexpected")

    def _on_req(self, f, payload, addr: tuple, now: float) -> None:
        ep = self.ep
        c = ep.counters
        if f[4] != 0:
            c.bump("control_malformed")
            return
        try:
            client_id, features = wire.decode_conn_payload(payload)
        except wire.MalformedDatagram:
            c.bump("control_malformed")
            return
        if client_id == 0:
            c.bump("control_malformed")
            return
        listener = self.listener
        if listener is None:
            c.conn_no_listener += 1
            return
        key = (addr, client_id)
        conn = self._by_peer.get(key)
        if conn is not None:
            # the client has not seen our REP yet: answer again with the same id
            rec = conn.record
            if rec.state in (CMState.REP_SENT, CMState.ESTABLISHED):
                ep.send_control(Opcode.CONN_REP, client_id,
                                wire.encode_conn_payload(rec.local_id, self.features), addr)
            return
        if listener.pending >= listener.backlog:
            c.conn_rejected += 1
            ep.send_control(Opcode.CONN_REP, client_id, wire.encode_conn_payload(0, self.features), addr)
            return
        qp = ep.create_qp(listener.send_cq, listener.recv_cq)
        qp.peer = addr
        qp.remote_conn_id = client_id
        conn = ep._conns[qp.qp_id]
        conn.peer_features = features
        cfg = ep.config
        conn.record = ConnectionRecord(qp.qp_id, addr, CMState.REP_SENT, remote_id=client_id,
                                       budget=cfg.cm_retries, interval=cfg.cm_interval,
                                       listener=listener)
        self._by_peer[key] = conn
        listener.pending += 1
        qp._set_state(QPState.CONNECTING)
        if listener.on_request is not None:
            listener.on_request(qp)
        self._transmit(conn.record, now)

    def _establish(self, conn: ConnState) -> None:
        rec = conn.record
        rec.state = CMState.ESTABLISHED
        rec.next_retransmit = math.inf
        conn.qp._set_state(QPState.CONNECTED)
        if rec.listener is not None:
            rec.listener.pending -= 1
            rec.listener._push(conn.qp)

    def implicit_establish(self, conn: ConnState, now: float) -> bool:
        """Treat data for a connection still awaiting its RTU as the RTU."""
        rec = conn.record
        if rec is not None and rec.state is CMState.REP_SENT:
            self._establish(conn)
            return True
        return False
