"""Transports: in-memory reference delivery and a real socket stream.

Both expose the same three calls (send, recv, close) and log every
message to a shared transcript at send time, so the engine's behavior
and the recorded trace are transport-independent.  The socket variant
pushes every frame through a real OS byte stream with per-party
drainer threads, exercising framing, partial reads, and reassembly.
"""

from __future__ import annotations

import queue
import socket
import threading
from collections import deque

import numpy as np

from .messages import Message, Phase, Transcript, decode_frame, encode_frame, read_frame

__all__ = ["MemoryTransport", "SocketTransport", "StagingTransport"]


class MemoryTransport:
    """Deterministic in-process mailboxes; the reference transport."""

    def __init__(self):
        self.transcript = Transcript()
        self._mailboxes = {}
        self._next_seq = 0

    def send(self, phase: Phase, sender: int, receiver: int, kind: str, payload) -> Message:
        msg = Message(
            seq=self._next_seq,
            phase=phase,
            sender=sender,
            receiver=receiver,
            kind=kind,
            payload=np.asarray(payload, dtype=np.float64),
        )
        self._next_seq += 1
        self.transcript.append(msg)
        self._mailboxes.setdefault(receiver, deque()).append(msg)
        return msg

    def recv(self, receiver: int, timeout: float = None) -> Message:
        box = self._mailboxes.get(receiver)
        if not box:
            raise LookupError(f"no message queued for party {receiver}")
        return box.popleft()

    def pending(self, receiver: int) -> int:
        return len(self._mailboxes.get(receiver, ()))

    def close(self) -> None:
        pass


class _Drainer(threading.Thread):
    """Reads frames off one party's socket into an unbounded queue.

    Draining eagerly keeps kernel buffers empty, so a burst of sends
    can never deadlock against an un-serviced receiver.
    """

    def __init__(self, sock: socket.socket, out: queue.Queue):
        super().__init__(daemon=True)
        self._sock = sock
        self._out = out
        self._buffer = bytearray()

    def run(self):
        while True:
            try:
                chunk = self._sock.recv(65536)
            except OSError:
                break
            if not chunk:
                break
            self._buffer.extend(chunk)
            while True:
                msg = read_frame(self._buffer)
                if msg is None:
                    break
                self._out.put(msg)


class SocketTransport:
    """Delivery over real socket pairs with length-prefixed frames.

    Each party owns an inbox socket pair; send() serializes the message
    and writes the frame to the receiver's write end under a lock, and
    a drainer thread per party reassembles frames on the read end.
    Numeric payloads round-trip exactly (big-endian IEEE-754 doubles).
    """

    RECV_TIMEOUT = 30.0

    def __init__(self, party_ids):
        self.transcript = Transcript()
        self._next_seq = 0
        self._lock = threading.Lock()
        self._write_ends = {}
        self._read_ends = {}
        self._queues = {}
        self._drainers = {}
        for pid in party_ids:
            w, r = socket.socketpair()
            self._write_ends[pid] = w
            self._read_ends[pid] = r
            q = queue.Queue()
            self._queues[pid] = q
            d = _Drainer(r, q)
            d.start()
            self._drainers[pid] = d

    def send(self, phase: Phase, sender: int, receiver: int, kind: str, payload) -> Message:
        if receiver not in self._write_ends:
            raise LookupError(f"unknown receiver {receiver}")
        with self._lock:
            msg = Message(
                seq=self._next_seq,
                phase=phase,
                sender=sender,
                receiver=receiver,
                kind=kind,
                payload=np.asarray(payload, dtype=np.float64),
            )
            self._next_seq += 1
            self.transcript.append(msg)
            frame = encode_frame(msg)
            self._write_ends[receiver].sendall(frame)
        return msg

    def recv(self, receiver: int, timeout: float = None) -> Message:
        try:
            return self._queues[receiver].get(timeout=timeout or self.RECV_TIMEOUT)
        except queue.Empty:
            raise TimeoutError(f"no frame arrived for party {receiver}")

    def close(self) -> None:
        for sock in self._write_ends.values():
            try:
                sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            sock.close()
        for sock in self._read_ends.values():
            sock.close()
        for d in self._drainers.values():
            d.join(timeout=5)


class StagingTransport:
    """Records sends locally for later replay onto a real transport.

    Used by the parallel engine mode: independent per-feature tasks run
    against private stages, then their message streams are committed in
    task-index order, so the final transcript is byte-identical to the
    sequential reference schedule.
    """

    def __init__(self):
        self.staged = []
        self._mailboxes = {}

    def send(self, phase: Phase, sender: int, receiver: int, kind: str, payload) -> Message:
        msg = Message(
            seq=0,  # placeholder; the real seq is assigned at replay
            phase=phase,
            sender=sender,
            receiver=receiver,
            kind=kind,
            payload=np.asarray(payload, dtype=np.float64),
        )
        self.staged.append(msg)
        self._mailboxes.setdefault(receiver, deque()).append(msg)
        return msg

    def recv(self, receiver: int, timeout: float = None) -> Message:
        box = self._mailboxes.get(receiver)
        if not box:
            raise LookupError(f"no staged message for party {receiver}")
        return box.popleft()

    def replay_onto(self, transport) -> None:
        """Re-send staged messages for sequencing and transcription.

        The payloads were already consumed from the stage mailboxes, so
        each re-sent delivery is popped right back; the real transport
        sees the same wire traffic and ordering as the sequential
        schedule without double delivery.
        """
        for msg in self.staged:
            transport.send(msg.phase, msg.sender, msg.receiver, msg.kind, msg.payload)
            transport.recv(msg.receiver)
