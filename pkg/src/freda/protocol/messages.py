"""Message schema, binary wire codec, and the run transcript.

Every exchange in the protocol is a :class:`Message`: a sequence
number, phase, sender, receiver, a string kind, and exactly one float64
array payload.  The wire form is a 4-byte big-endian length prefix
followed by a self-describing body; the same bytes feed the socket
transport, the transcript digest, and the audit trail, so what is
checked is literally what is sent.

Party ids are plain integers: source clients count up from 0, the
aggregator is -1, the target client is -2.
"""

from __future__ import annotations

import enum
import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

AGGREGATOR = -1
TARGET = -2

_HEADER = struct.Struct(">IBhhH")  # seq, phase, sender, receiver, kind length
_U32 = struct.Struct(">I")

__all__ = [
    "AGGREGATOR",
    "TARGET",
    "Phase",
    "Message",
    "Transcript",
    "role_name",
    "encode_message",
    "decode_message",
    "encode_frame",
    "decode_frame",
    "read_frame",
    "seed_to_array",
    "array_to_seed",
]


def role_name(party: int) -> str:
    if party == AGGREGATOR:
        return "aggregator"
    if party == TARGET:
        return "target"
    if party >= 0:
        return "source"
    raise ValueError(f"invalid party id {party}")


class Phase(enum.IntEnum):
    SETUP = 0
    FEATURE_MODELS = 1
    WEIGHTS = 2
    LAMBDA_SEARCH = 3
    FINAL_TRAINING = 4
    RESULTS = 5


@dataclass(frozen=True)
class Message:
    """One protocol exchange with a single array payload."""

    seq: int
    phase: Phase
    sender: int
    receiver: int
    kind: str
    payload: np.ndarray

    def __post_init__(self):
        if not 0 <= self.seq < 2**32:
            raise ValueError("seq out of range")
        role_name(self.sender)
        role_name(self.receiver)
        if not self.kind or len(self.kind.encode()) > 2**16 - 1:
            raise ValueError("kind must be a short nonempty tag")
        payload = np.ascontiguousarray(self.payload, dtype=np.float64)
        object.__setattr__(self, "phase", Phase(self.phase))
        object.__setattr__(self, "payload", payload)

    @property
    def base_kind(self) -> str:
        """Kind with any '#<tag>' instance suffix removed."""
        return self.kind.split("#", 1)[0]


def encode_message(msg: Message) -> bytes:
    """Body bytes: header, kind, then shape-prefixed big-endian floats."""
    kind = msg.kind.encode()
    parts = [
        _HEADER.pack(msg.seq, int(msg.phase), msg.sender, msg.receiver, len(kind)),
        kind,
        _U32.pack(msg.payload.ndim),
    ]
    for dim in msg.payload.shape:
        parts.append(_U32.pack(dim))
    parts.append(msg.payload.astype(">f8", copy=False).tobytes())
    return b"".join(parts)


def decode_message(body: bytes) -> Message:
    seq, phase, sender, receiver, kind_len = _HEADER.unpack_from(body, 0)
    off = _HEADER.size
    kind = body[off : off + kind_len].decode()
    off += kind_len
    (rank,) = _U32.unpack_from(body, off)
    off += _U32.size
    dims = []
    for _ in range(rank):
        (d,) = _U32.unpack_from(body, off)
        dims.append(d)
        off += _U32.size
    count = 1
    for d in dims:
        count *= d
    data = np.frombuffer(body, dtype=">f8", count=count, offset=off)
    if off + 8 * count != len(body):
        raise ValueError("trailing bytes in message body")
    payload = data.astype(np.float64).reshape(dims)
    return Message(seq=seq, phase=Phase(phase), sender=sender, receiver=receiver,
                   kind=kind, payload=payload)


def encode_frame(msg: Message) -> bytes:
    """Length-prefixed wire frame."""
    body = encode_message(msg)
    return _U32.pack(len(body)) + body


def decode_frame(frame: bytes) -> Message:
    if len(frame) < 4:
        raise ValueError("truncated frame")
    (length,) = _U32.unpack_from(frame, 0)
    if len(frame) != 4 + length:
        raise ValueError("frame length mismatch")
    return decode_message(frame[4:])


def read_frame(buffer: bytearray):
    """Pop one complete frame from a byte buffer, or return None.

    Returns (message, remaining_buffer_consumed) semantics: mutates the
    buffer in place and returns the decoded message when a full frame is
    available.
    """
    if len(buffer) < 4:
        return None
    (length,) = _U32.unpack_from(bytes(buffer[:4]), 0)
    if len(buffer) < 4 + length:
        return None
    frame = bytes(buffer[: 4 + length])
    del buffer[: 4 + length]
    return decode_frame(frame)


def seed_to_array(seed: int) -> np.ndarray:
    """Split a 64-bit seed into two exactly-representable 32-bit halves."""
    if not 0 <= seed < 2**64:
        raise ValueError("seed out of range")
    return np.array([float(seed >> 32), float(seed & 0xFFFFFFFF)])


def array_to_seed(arr: np.ndarray) -> int:
    hi, lo = (int(round(v)) for v in np.asarray(arr, dtype=np.float64))
    return (hi << 32) | lo


@dataclass
class Transcript:
    """Ordered record of every message sent during a run."""

    meta: dict = field(default_factory=dict)
    messages: list = field(default_factory=list)

    def append(self, msg: Message) -> None:
        self.messages.append(msg)

    def __len__(self) -> int:
        return len(self.messages)

    def digest(self) -> str:
        """SHA-256 over the concatenated wire frames of all messages."""
        h = hashlib.sha256()
        for msg in self.messages:
            h.update(encode_frame(msg))
        return h.hexdigest()

    def write_jsonl(self, path, inline_payloads: bool = False) -> None:
        """One JSON object per line; payloads as digests or inline lists."""
        path = Path(path)
        with path.open("w") as fh:
            fh.write(json.dumps({"meta": self.meta}, sort_keys=True) + "\n")
            for msg in self.messages:
                row = {
                    "seq": msg.seq,
                    "phase": msg.phase.name,
                    "sender": msg.sender,
                    "receiver": msg.receiver,
                    "kind": msg.kind,
                    "shape": list(msg.payload.shape),
                    "sha256": hashlib.sha256(encode_frame(msg)).hexdigest(),
                }
                if inline_payloads:
                    row["payload"] = msg.payload.ravel().tolist()
                fh.write(json.dumps(row) + "\n")

    @staticmethod
    def read_jsonl(path) -> "Transcript":
        """Load a transcript file; digest-only payloads come back empty.

        Messages without inline payloads carry a zero-length array and
        keep their recorded shape in ``meta`` terms only; structural
        audits still work, value scans need inline payloads.
        """
        path = Path(path)
        transcript = Transcript()
        with path.open() as fh:
            first = json.loads(fh.readline())
            transcript.meta = first.get("meta", {})
            for line in fh:
                row = json.loads(line)
                shape = tuple(row["shape"])
                if "payload" in row:
                    payload = np.array(row["payload"], dtype=np.float64).reshape(shape)
                else:
                    payload = np.zeros(shape)
                    transcript.meta.setdefault("digest_only_seqs", []).append(row["seq"])
                transcript.append(
                    Message(
                        seq=row["seq"],
                        phase=Phase[row["phase"]],
                        sender=row["sender"],
                        receiver=row["receiver"],
                        kind=row["kind"],
                        payload=payload,
                    )
                )
        return transcript
