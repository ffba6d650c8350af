"""Wire codec for batched protocol packets and the two channel flavors.

Packet layout (little-endian):
    magic   4 bytes  b"CRC1"
    session 8 bytes  unsigned
    round   4 bytes  unsigned
    count   2 bytes  number of submessages
followed by one entry per submessage:
    frame_id 4 bytes, kind 1 byte, pass_index 1 byte, payload_bit_count
    4 bytes, then the payload padded to a whole byte.

The simulated channel delivers packets in FIFO order after a configurable
one-way delay; the socket channel runs the same packets over TCP with a
32-bit length prefix.
"""

from __future__ import annotations

import socket
import struct
import threading
import time
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .cascade import MsgKind, ProtocolMessage

MAGIC = b"CRC1"
_HEADER = struct.Struct("<4sQIH")
_SUBHEADER = struct.Struct("<IBBI")
MAX_SUBMESSAGES = 0xFFFF


class PacketDecodeError(Exception):
    pass


class ChannelClosed(Exception):
    pass


@dataclass(frozen=True)
class Packet:
    session_id: int
    round: int
    submessages: tuple[ProtocolMessage, ...]


def encode_packet(packet: Packet) -> bytes:
    if len(packet.submessages) > MAX_SUBMESSAGES:
        raise ValueError("too many submessages for one packet")
    parts = [
        _HEADER.pack(MAGIC, packet.session_id, packet.round, len(packet.submessages))
    ]
    for msg in packet.submessages:
        n_bytes = (msg.bit_count + 7) // 8
        if len(msg.payload) != n_bytes:
            raise ValueError(
                f"payload of {len(msg.payload)} bytes does not hold "
                f"{msg.bit_count} bits"
            )
        parts.append(
            _SUBHEADER.pack(msg.frame_id, int(msg.kind), msg.pass_index, msg.bit_count)
        )
        parts.append(msg.payload)
    return b"".join(parts)


def decode_packet(data: bytes) -> tuple[Packet, int]:
    """Decode one packet from the head of a buffer.

    Returns (packet, bytes_consumed); raises PacketDecodeError on anything
    malformed, without surfacing a partial packet.
    """
    if len(data) < _HEADER.size:
        raise PacketDecodeError("truncated header")
    magic, session_id, rnd, count = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise PacketDecodeError(f"bad magic {magic!r}")
    offset = _HEADER.size
    msgs = []
    for _ in range(count):
        if len(data) < offset + _SUBHEADER.size:
            raise PacketDecodeError("truncated submessage header")
        frame_id, kind, pass_index, bit_count = _SUBHEADER.unpack_from(data, offset)
        offset += _SUBHEADER.size
        try:
            kind = MsgKind(kind)
        except ValueError as exc:
            raise PacketDecodeError(f"unknown message kind {kind}") from exc
        n_bytes = (bit_count + 7) // 8
        if len(data) < offset + n_bytes:
            raise PacketDecodeError("truncated payload")
        msgs.append(
            ProtocolMessage(frame_id, kind, pass_index, data[offset : offset + n_bytes], bit_count)
        )
        offset += n_bytes
    return Packet(session_id, rnd, tuple(msgs)), offset


def batch(
    session_id: int, round_no: int, msgs: list[ProtocolMessage]
) -> list[Packet]:
    """Wrap one round's messages into uniform packets.

    An empty message list yields a single heartbeat packet; oversized
    batches split into continuation packets sharing the round number.
    """
    if not msgs:
        return [Packet(session_id, round_no, ())]
    return [
        Packet(session_id, round_no, tuple(msgs[i : i + MAX_SUBMESSAGES]))
        for i in range(0, len(msgs), MAX_SUBMESSAGES)
    ]


@dataclass(frozen=True)
class ChannelConfig:
    one_way_latency_ms: float = 0.0
    jitter_ms: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.one_way_latency_ms < 0 or self.jitter_ms < 0:
            raise ValueError("latency and jitter must be nonnegative")


class _SimQueue:
    """One direction of the simulated link: FIFO with delayed visibility."""

    def __init__(self, cfg: ChannelConfig, seed_salt: int):
        self.latency = cfg.one_way_latency_ms / 1000.0
        self.jitter = cfg.jitter_ms / 1000.0
        self.rng = np.random.default_rng((cfg.seed, seed_salt))
        self.items: deque[tuple[float, bytes]] = deque()
        self.lock = threading.Lock()
        self.ready = threading.Condition(self.lock)
        self.closed = False
        self.last_due = 0.0

    def put(self, data: bytes) -> None:
        with self.lock:
            if self.closed:
                raise ChannelClosed("send on closed channel")
            due = time.monotonic() + self.latency
            if self.jitter:
                due += float(self.rng.uniform(0.0, self.jitter))
            # FIFO: a later send never becomes visible before an earlier one.
            due = max(due, self.last_due)
            self.last_due = due
            self.items.append((due, data))
            self.ready.notify_all()

    def get(self, timeout: float | None = None) -> bytes | None:
        deadline = None if timeout is None else time.monotonic() + timeout
        with self.lock:
            while True:
                if self.items:
                    due, data = self.items[0]
                    now = time.monotonic()
                    if due <= now:
                        self.items.popleft()
                        return data
                    wait = due - now
                    if deadline is not None:
                        wait = min(wait, deadline - now)
                        if wait <= 0:
                            return None
                    self.ready.wait(wait)
                    continue
                if self.closed:
                    raise ChannelClosed("receive on closed channel")
                if deadline is None:
                    self.ready.wait()
                else:
                    wait = deadline - time.monotonic()
                    if wait <= 0:
                        return None
                    self.ready.wait(wait)

    def close(self) -> None:
        with self.lock:
            self.closed = True
            self.ready.notify_all()


class SimulatedEndpoint:
    """One party's endpoint of an in-process link; lossless and ordered."""

    def __init__(self, outgoing: _SimQueue, incoming: _SimQueue):
        self._out = outgoing
        self._in = incoming

    def send(self, packet: Packet) -> None:
        self._out.put(encode_packet(packet))

    def recv(self, timeout: float | None = None) -> Packet | None:
        data = self._in.get(timeout)
        if data is None:
            return None
        packet, consumed = decode_packet(data)
        if consumed != len(data):
            raise PacketDecodeError("trailing bytes after packet")
        return packet

    def close(self) -> None:
        self._out.close()
        self._in.close()


def simulated_link(cfg: ChannelConfig) -> tuple[SimulatedEndpoint, SimulatedEndpoint]:
    """Create both ends of a latency-modelled in-process channel."""
    ab = _SimQueue(cfg, 1)
    ba = _SimQueue(cfg, 2)
    return SimulatedEndpoint(ab, ba), SimulatedEndpoint(ba, ab)


class SocketEndpoint:
    """Length-prefixed packet framing over a connected TCP stream."""

    def __init__(self, sock: socket.socket):
        self.sock = sock
        self._buf = b""
        self._send_lock = threading.Lock()

    @classmethod
    def listen(cls, host: str, port: int, timeout: float | None = None) -> "SocketEndpoint":
        srv = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        srv.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        srv.bind((host, port))
        srv.listen(1)
        if timeout is not None:
            srv.settimeout(timeout)
        conn, _ = srv.accept()
        srv.close()
        conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        return cls(conn)

    @classmethod
    def connect(cls, host: str, port: int, timeout: float = 10.0) -> "SocketEndpoint":
        deadline = time.monotonic() + timeout
        while True:
            try:
                sock = socket.create_connection((host, port), timeout=timeout)
                sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
                return cls(sock)
            except OSError:
                if time.monotonic() >= deadline:
                    raise
                time.sleep(0.05)

    def send(self, packet: Packet) -> None:
        data = encode_packet(packet)
        frame = struct.pack("<I", len(data)) + data
        with self._send_lock:
            try:
                self.sock.sendall(frame)
            except OSError as exc:
                raise ChannelClosed(str(exc)) from exc

    def _read_exact(self, n: int, timeout: float | None) -> bytes | None:
        self.sock.settimeout(timeout)
        while len(self._buf) < n:
            try:
                chunk = self.sock.recv(65536)
            except socket.timeout:
                return None
            except OSError as exc:
                raise ChannelClosed(str(exc)) from exc
            if not chunk:
                raise ChannelClosed("peer disconnected")
            self._buf += chunk
        out, self._buf = self._buf[:n], self._buf[n:]
        return out

    def recv(self, timeout: float | None = None) -> Packet | None:
        header = self._read_exact(4, timeout)
        if header is None:
            return None
        (length,) = struct.unpack("<I", header)
        data = self._read_exact(length, None)
        packet, consumed = decode_packet(data)
        if consumed != length:
            raise PacketDecodeError("length prefix does not match packet")
        return packet

    def close(self) -> None:
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()


@dataclass
class ChannelTap:
    """Counts payload bits per message kind in each direction."""

    sent_bits: dict[MsgKind, int] = field(default_factory=dict)
    received_bits: dict[MsgKind, int] = field(default_factory=dict)

    def record(self, direction: str, packet: Packet) -> None:
        book = self.sent_bits if direction == "sent" else self.received_bits
        for msg in packet.submessages:
            book[msg.kind] = book.get(msg.kind, 0) + msg.bit_count


class TappedEndpoint:
    """Endpoint wrapper that feeds a ChannelTap; used by leak audits."""

    def __init__(self, inner, tap: ChannelTap):
        self.inner = inner
        self.tap = tap

    def send(self, packet: Packet) -> None:
        self.tap.record("sent", packet)
        self.inner.send(packet)

    def recv(self, timeout: float | None = None) -> Packet | None:
        packet = self.inner.recv(timeout)
        if packet is not None:
            self.tap.record("received", packet)
        return packet

    def close(self) -> None:
        self.inner.close()
