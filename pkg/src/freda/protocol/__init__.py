"""Multi-party protocol engine: messages, transports, phases, audit."""

from .messages import (
    AGGREGATOR,
    TARGET,
    Message,
    Phase,
    Transcript,
    decode_frame,
    encode_frame,
    role_name,
)
from .transport import MemoryTransport, SocketTransport
from .engine import RunResult, run_full_protocol
from .audit import AuditReport, audit_transcript

__all__ = [
    "AGGREGATOR",
    "TARGET",
    "Message",
    "Phase",
    "Transcript",
    "decode_frame",
    "encode_frame",
    "role_name",
    "MemoryTransport",
    "SocketTransport",
    "RunResult",
    "run_full_protocol",
    "AuditReport",
    "audit_transcript",
]
