"""Two-party message transport with byte-exact framing and traffic accounting.

Wire frame: ``[tag:1][length:8 LE][payload]``.  Payloads produced by
:meth:`Endpoint.exchange` and :meth:`Endpoint.send_tensors` begin with a 4-byte
little-endian step sequence number, so a desynchronised peer is detected on
the first mismatched step rather than as garbage arithmetic.

Tensors on the wire: ``[ndim:1][dims:8 LE each][scale:1][elements:8 LE each]``.
"""
from __future__ import annotations

import hashlib
import queue
import socket
import struct
import threading
import time
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

from .errors import MPCConnectionError, ProtocolError

HEADER = struct.Struct("<BQ")
SEQ = struct.Struct("<I")
PHASES = ("router", "argmax", "retrieval", "expert", "io")


class Tag(IntEnum):
    DATA = 0x00
    HANDSHAKE = 0x01
    OPEN = 0x02
    INPUT = 0x03
    OUTPUT = 0x04
    CLOSE = 0x05
    HELLO = 0x06


_KNOWN_TAGS = {int(t) for t in Tag}


@dataclass
class Message:
    tag: int
    payload: bytes = b""

    @property
    def length(self) -> int:
        return len(self.payload)


@dataclass
class Counters:
    bytes_sent: int = 0
    bytes_received: int = 0
    rounds: int = 0

    def __add__(self, other: "Counters") -> "Counters":
        return Counters(self.bytes_sent + other.bytes_sent,
                        self.bytes_received + other.bytes_received,
                        self.rounds + other.rounds)

    def __sub__(self, other: "Counters") -> "Counters":
        return Counters(self.bytes_sent - other.bytes_sent,
                        self.bytes_received - other.bytes_received,
                        self.rounds - other.rounds)

    @property
    def total_bytes(self) -> int:
        return self.bytes_sent + self.bytes_received

    def copy(self) -> "Counters":
        return Counters(self.bytes_sent, self.bytes_received, self.rounds)


@dataclass
class CommStats(Counters):
    """Totals for one endpoint plus the per-phase attribution of snapshots."""

    phases: dict = field(default_factory=dict)
    _mark: Counters = field(default_factory=Counters, repr=False)

    def totals(self) -> Counters:
        return Counters(self.bytes_sent, self.bytes_received, self.rounds)

    def snapshot(self, label: str) -> Counters:
        now = self.totals()
        delta = now - self._mark
        self._mark = now
        self.phases[label] = self.phases.get(label, Counters()) + delta
        return delta

    def as_dict(self) -> dict:
        return {
            "bytes_sent": self.bytes_sent,
            "bytes_received": self.bytes_received,
            "rounds": self.rounds,
            "phases": {k: vars(v).copy() for k, v in sorted(self.phases.items())},
        }


def encode_tensor(arr, scale: int = 0) -> bytes:
    arr = np.asarray(arr, dtype=np.uint64)
    if arr.ndim > 255 or not 0 <= scale <= 255:
        raise ProtocolError("tensor rank or scale does not fit the wire format")
    head = struct.pack("<B", arr.ndim) + b"".join(struct.pack("<Q", d) for d in arr.shape)
    return head + struct.pack("<B", scale) + np.ascontiguousarray(arr, dtype="<u8").tobytes()


def decode_tensor(buf, offset: int = 0) -> tuple[np.ndarray, int, int]:
    """Returns ``(array, scale, next_offset)``."""
    mv = memoryview(buf)
    try:
        ndim = mv[offset]
        offset += 1
        dims = struct.unpack_from(f"<{ndim}Q", mv, offset)
        offset += 8 * ndim
        scale = mv[offset]
        offset += 1
    except (IndexError, struct.error) as exc:
        raise ProtocolError("truncated tensor header") from exc
    n = int(np.prod(dims, dtype=np.int64)) if ndim else 1
    end = offset + 8 * n
    if end > len(mv):
        raise ProtocolError("truncated tensor body")
    arr = np.frombuffer(mv[offset:end], dtype="<u8").astype(np.uint64).reshape(dims)
    return arr, scale, end


def decode_tensors(buf, offset: int = 0) -> list[tuple[np.ndarray, int]]:
    out = []
    while offset < len(buf):
        arr, scale, offset = decode_tensor(buf, offset)
        out.append((arr, scale))
    return out


class Endpoint:
    """One side of a two-party link.

    ``party`` orders the two halves of every exchange: party 0 writes first,
    party 1 reads first.  That keeps socket buffers from deadlocking on large
    opens and makes transcripts identical across backends.
    """

    def __init__(self, party: int, record: bool = False):
        if party not in (0, 1):
            raise ValueError("party must be 0 or 1")
        self.party = party
        self.stats = CommStats()
        self.seq = 0
        self._digest = hashlib.sha256()
        self.record = record
        self.transcript: list[tuple[str, bytes]] = []
        self.closed = False
        self._oseq = 0
        self._iseq = 0

    # backend hooks
    def _write(self, data: bytes) -> None:  # pragma: no cover - abstract
        raise NotImplementedError

    def _read(self, n: int) -> bytes:  # pragma: no cover - abstract
        raise NotImplementedError

    def _log(self, direction: str, frame: bytes) -> None:
        self._digest.update(direction.encode() + frame)
        if self.record:
            self.transcript.append((direction, frame))

    def transcript_hash(self) -> str:
        return self._digest.hexdigest()

    def send(self, msg: Message) -> None:
        if self.closed:
            raise MPCConnectionError("endpoint is closed")
        if int(msg.tag) not in _KNOWN_TAGS:
            raise ProtocolError(f"unknown message tag {msg.tag}")
        frame = HEADER.pack(int(msg.tag), len(msg.payload)) + bytes(msg.payload)
        self._write(frame)
        self.stats.bytes_sent += len(frame)
        self._log("S", frame)

    def recv(self) -> Message:
        head = self._read(HEADER.size)
        tag, length = HEADER.unpack(head)
        if tag not in _KNOWN_TAGS:
            raise ProtocolError(f"unknown message tag {tag}")
        payload = self._read(length) if length else b""
        frame = head + payload
        self.stats.bytes_received += len(frame)
        self._log("R", frame)
        return Message(tag, payload)

    def recv_expect(self, tag: int) -> Message:
        msg = self.recv()
        if msg.tag != int(tag):
            raise ProtocolError(f"expected tag {Tag(tag).name}, got {msg.tag}")
        return msg

    def _stamp(self, body: bytes) -> bytes:
        payload = SEQ.pack(self.seq & 0xFFFFFFFF) + body
        self.seq += 1
        return payload

    def _unstamp(self, payload: bytes, expected: int) -> bytes:
        if len(payload) < SEQ.size:
            raise ProtocolError("payload shorter than its sequence number")
        (peer_seq,) = SEQ.unpack_from(payload)
        if peer_seq != expected & 0xFFFFFFFF:
            raise ProtocolError(f"step desynchronised: local {expected}, peer {peer_seq}")
        return payload[SEQ.size:]

    def exchange(self, body: bytes, tag: int = Tag.OPEN) -> bytes:
        """Symmetric swap of one payload with the peer; counts one round."""
        step = self.seq
        out = Message(tag, self._stamp(body))
        if self.party == 0:
            self.send(out)
            reply = self.recv()
        else:
            reply = self.recv()
            self.send(out)
        if reply.tag != int(tag):
            raise ProtocolError(f"exchange tag mismatch: {reply.tag} != {int(tag)}")
        self.stats.rounds += 1
        return self._unstamp(reply.payload, step)

    def exchange_tensors(self, arrays, scales=None) -> list[np.ndarray]:
        scales = scales or [0] * len(arrays)
        body = b"".join(encode_tensor(a, s) for a, s in zip(arrays, scales))
        got = decode_tensors(self.exchange(body))
        if len(got) != len(arrays):
            raise ProtocolError("peer opened a different number of tensors")
        out = []
        for (arr, _), mine in zip(got, arrays):
            if arr.shape != np.shape(mine):
                raise ProtocolError(f"opened shape {arr.shape} != local {np.shape(mine)}")
            out.append(arr)
        return out

    def send_tensors(self, tag: int, arrays, scales=None) -> None:
        """Unidirectional: counts bytes but not a round."""
        scales = scales or [0] * len(arrays)
        body = b"".join(encode_tensor(a, s) for a, s in zip(arrays, scales))
        self.send(Message(tag, self._stamp_oneway(body)))

    def recv_tensors(self, tag: int) -> list[tuple[np.ndarray, int]]:
        return self.tensors_from(self.recv_expect(tag))

    def tensors_from(self, msg: Message) -> list[tuple[np.ndarray, int]]:
        """Decode a one-way tensor message already taken off the link."""
        return decode_tensors(self._unstamp_oneway(msg.payload))

    # one-way traffic gets its own counter so it never perturbs the
    # exchange sequence that both compute parties must agree on
    def _stamp_oneway(self, body: bytes) -> bytes:
        seq = self._oseq
        self._oseq += 1
        return SEQ.pack(seq & 0xFFFFFFFF) + body

    def _unstamp_oneway(self, payload: bytes) -> bytes:
        seq = self._iseq
        self._iseq += 1
        return self._unstamp(payload, seq)

    def snapshot_stats(self, label: str) -> Counters:
        return self.stats.snapshot(label)

    def close(self) -> None:
        self.closed = True


class _InProcessEndpoint(Endpoint):
    def __init__(self, party, inbox: queue.Queue, outbox: queue.Queue, record=False):
        super().__init__(party, record)
        self._inbox = inbox
        self._outbox = outbox
        self._buf = bytearray()

    def _write(self, data: bytes) -> None:
        self._outbox.put(data)

    def _read(self, n: int) -> bytes:
        while len(self._buf) < n:
            chunk = self._inbox.get()
            if chunk is None:
                self._inbox.put(None)
                raise MPCConnectionError("peer closed the link")
            self._buf += chunk
        out = bytes(self._buf[:n])
        del self._buf[:n]
        return out

    def close(self) -> None:
        if not self.closed:
            self._outbox.put(None)
        super().close()


def inprocess_pair(record: bool = False) -> tuple[Endpoint, Endpoint]:
    """Two connected endpoints backed by in-memory queues."""
    a, b = queue.Queue(), queue.Queue()
    return _InProcessEndpoint(0, a, b, record), _InProcessEndpoint(1, b, a, record)


class SocketEndpoint(Endpoint):
    def __init__(self, party: int, sock: socket.socket, record: bool = False):
        super().__init__(party, record)
        self.sock = sock
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)

    def _write(self, data: bytes) -> None:
        try:
            self.sock.sendall(data)
        except OSError as exc:
            raise MPCConnectionError(str(exc)) from exc

    def _read(self, n: int) -> bytes:
        buf = bytearray()
        while len(buf) < n:
            try:
                chunk = self.sock.recv(n - len(buf))
            except OSError as exc:
                raise MPCConnectionError(str(exc)) from exc
            if not chunk:
                raise MPCConnectionError("peer closed the connection")
            buf += chunk
        return bytes(buf)

    def close(self) -> None:
        if not self.closed:
            try:
                self.sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            self.sock.close()
        super().close()


def parse_address(addr: str) -> tuple[str, int]:
    host, _, port = addr.rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"expected host:port, got {addr!r}")
    return host, int(port)


def listen(addr: str) -> socket.socket:
    host, port = parse_address(addr)
    srv = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    srv.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    srv.bind((host, port))
    srv.listen(4)
    return srv


def connect(addr: str, timeout: float = 30.0) -> socket.socket:
    host, port = parse_address(addr)
    deadline = time.monotonic() + timeout
    while True:
        try:
            return socket.create_connection((host, port))
        except OSError:
            if time.monotonic() > deadline:
                raise MPCConnectionError(f"could not reach {addr}")
            time.sleep(0.05)


def socket_pair(record: bool = False) -> tuple[SocketEndpoint, SocketEndpoint]:
    """A loopback TCP link; used by tests comparing the two backends."""
    srv = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    srv.bind(("127.0.0.1", 0))
    srv.listen(1)
    port = srv.getsockname()[1]
    holder = {}
    t = threading.Thread(target=lambda: holder.setdefault("s", srv.accept()[0]))
    t.start()
    client = socket.create_connection(("127.0.0.1", port))
    t.join()
    srv.close()
    return SocketEndpoint(0, holder["s"], record), SocketEndpoint(1, client, record)


def accept_endpoint(addr: str, party: int, timeout: float = 30.0, record: bool = False) -> SocketEndpoint:
    """Listen on ``addr`` and wrap the first incoming connection."""
    srv = listen(addr)
    srv.settimeout(timeout)
    try:
        sock, _ = srv.accept()
    except socket.timeout:
        raise MPCConnectionError(f"nobody connected to {addr} within {timeout}s") from None
    finally:
        srv.close()
    sock.settimeout(None)
    return SocketEndpoint(party, sock, record)


def connect_endpoint(addr: str, party: int, timeout: float = 30.0, record: bool = False) -> SocketEndpoint:
    return SocketEndpoint(party, connect(addr, timeout), record)
