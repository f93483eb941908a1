"""Unreliable-connected RDMA semantics over UDP datagrams."""

from .engine import Endpoint, EndpointConfig, segment_message
from .impair import Impairment, ImpairmentSpec, UdpProxy
from .metrics import CounterSet, EfficiencyReport, compute_efficiency, sample_cpu
from .verbs import (
    Access,
    CompletionQueue,
    MemoryRegion,
    QPState,
    QueuePair,
    WCStatus,
    WorkCompletion,
    WorkRequest,
    WROpcode,
    poll_cq,
)
from .wire import DatagramHeader, Opcode, decode_header, encode_header

__all__ = [
    "Access", "CompletionQueue", "CounterSet", "DatagramHeader", "EfficiencyReport", "Endpoint",
    "EndpointConfig", "Impairment", "ImpairmentSpec", "MemoryRegion", "Opcode", "QPState",
    "QueuePair", "UdpProxy", "WCStatus", "WROpcode", "WorkCompletion", "WorkRequest",
    "compute_efficiency", "decode_header", "encode_header", "poll_cq", "sample_cpu",
    "segment_message",
]
