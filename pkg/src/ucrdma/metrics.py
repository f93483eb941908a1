"""Counters, CPU-time sampling and the bandwidth-per-resource efficiency metric."""

from __future__ import annotations

import csv
import json
import os
import time
from dataclasses import asdict, dataclass, field, fields


@dataclass
class CounterSet:
    """Monotonic endpoint counters. Written by the progress thread only."""

    datagrams_tx: int = 0
    datagrams_rx: int = 0
    bytes_tx: int = 0
    bytes_rx: int = 0
    messages_sent: int = 0
    payload_bytes_sent: int = 0
    messages_completed: int = 0
    bytes_delivered: int = 0
    messages_dropped_incomplete: int = 0
    reassembly_evictions: int = 0
    reassembly_timeouts: int = 0
    # payload bytes copied into the final target, for delivered messages only
    payload_copy_bytes: int = 0
    # payload bytes copied for messages that were later dropped
    payload_copy_bytes_discarded: int = 0
    duplicate_fragment: int = 0
    stale_fragment: int = 0
    bounds_violation: int = 0
    recv_no_buffer: int = 0
    recv_too_small: int = 0
    remote_invalid_stag: int = 0
    unauthorized: int = 0
    unknown_conn: int = 0
    peer_mismatch: int = 0
    conn_not_connected: int = 0
    malformed: int = 0
    read_requests_sent: int = 0
    read_requests_served: int = 0
    read_timeouts: int = 0
    stale_read_response: int = 0
    read_disabled: int = 0
    cq_overflow: int = 0
    tx_errors: int = 0
    connect_timeouts: int = 0
    accept_timeouts: int = 0
    conn_rejected: int = 0
    conn_no_listener: int = 0
    extra: dict[str, int] = field(default_factory=dict)

    def bump(self, name: str, k: int = 1) -> None:
        if name in self.__dataclass_fields__ and name != "extra":
            setattr(self, name, getattr(self, name) + k)
        else:
            self.extra[name] = self.extra.get(name, 0) + k

    def snapshot(self) -> dict[str, int]:
        snap = {f.name: getattr(self, f.name) for f in fields(self) if f.name != "extra"}
        snap.update(self.extra)
        return snap


@dataclass(frozen=True)
class EfficiencyReport:
    bandwidth_gbps: float
    resource: float
    resource_kind: str  # "watts" or "cpu_seconds_per_second"
    efficiency: float

    def to_dict(self) -> dict:
        return asdict(self)


def compute_efficiency(bandwidth_gbps: float, resource: float,
                       resource_kind: str = "watts") -> EfficiencyReport:
    """Efficiency as delivered bandwidth divided by the resource spent on it.

    With watts this is Gb/s per W; with the CPU proxy, Gb/s per CPU-second
    per second.
    """
    if resource <= 0:
        raise ValueError(f"resource must be positive, got {resource}")
    if bandwidth_gbps < 0:
        raise ValueError(f"bandwidth must be non-negative, got {bandwidth_gbps}")
    return EfficiencyReport(bandwidth_gbps, resource, resource_kind, bandwidth_gbps / resource)


class CpuMeter:
    """Process CPU time (user + system, all threads) per wall-clock second."""

    def __init__(self):
        self.start()

    def start(self) -> None:
        self._wall = time.perf_counter()
        self._cpu = time.process_time()

    def cpu_seconds(self) -> float:
        """CPU time consumed since :meth:`start`."""
        return time.process_time() - self._cpu

    def read(self) -> float:
        wall = time.perf_counter() - self._wall
        if wall <= 0:
            return 0.0
        return (time.process_time() - self._cpu) / wall


def sample_cpu(interval: float) -> float:
    if interval <= 0:
        raise ValueError("interval must be positive")
    meter = CpuMeter()
    time.sleep(interval)
    return meter.read()


def gbps(nbytes: int, seconds: float) -> float:
    return nbytes * 8 / seconds / 1e9 if seconds > 0 else 0.0


def write_jsonl(path, record: dict) -> None:
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(json.dumps(record, sort_keys=True) + "\n")


def write_csv(path, rows: list[dict], columns: list[str] | None = None, append: bool = False) -> None:
    """Write ``rows`` with a header line; with ``append``, add to an existing file instead."""
    if columns is None:
        columns = list(rows[0]) if rows else []
    fresh = not append or not os.path.exists(path) or os.path.getsize(path) == 0
    with open(path, "w" if not append else "a", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore")
        if fresh:
            writer.writeheader()
        writer.writerows(rows)
