"""Framed binary protocol between the edge and the cloud.

Frame layout, little-endian::

    magic      4s   b"SFT1"
    msg_type   u8
    iteration  u64
    ndim       u8
    dims       ndim * u32
    length     u32  payload byte count
    payload    bytes
    checksum   u32  CRC-32 of payload

Tensor payloads are float32.  Per iteration the edge sends ACTIVATION,
[RESIDUAL], LABELS and the cloud answers GRADIENT, [RESIDUAL], METRICS.
"""

from __future__ import annotations

import enum
import socket
import struct
import threading
import time
import zlib
from dataclasses import dataclass

import numpy as np

from .decompose import ResidualMode

MAGIC = b"SFT1"
PROTOCOL_VERSION = 1
DEFAULT_PORT = 7631

_HEAD = struct.Struct("<4sBQB")
_LEN = struct.Struct("<I")
_CRC = struct.Struct("<I")
_METRICS = struct.Struct("<ddd")
_SESSION = struct.Struct("<QIIBIIH")


class MsgType(enum.IntEnum):
    HELLO = 1
    CONFIG_ACK = 2
    ACTIVATION = 3
    LABELS = 4
    GRADIENT = 5
    METRICS = 6
    RESIDUAL = 7
    SHUTDOWN = 8


TENSOR_TYPES = {MsgType.ACTIVATION, MsgType.GRADIENT, MsgType.RESIDUAL}


class WireError(Exception):
    pass


class BadMagic(WireError):
    pass


class UnknownMessageType(WireError):
    pass


class ChecksumMismatch(WireError):
    pass


class TruncatedFrame(WireError):
    pass


class MalformedFrame(WireError):
    pass


class ProtocolError(WireError):
    pass


class ConnectionClosed(WireError):
    """Peer closed the stream at a frame boundary (or the pipe broke)."""


class HandshakeError(WireError):
    def __init__(self, field: str, message: str):
        super().__init__(f"handshake rejected: {field}: {message}")
        self.field = field


@dataclass(frozen=True)
class Frame:
    msg_type: MsgType
    iteration: int
    dims: tuple[int, ...] = ()
    payload: bytes = b""

    @classmethod
    def tensor(cls, msg_type: MsgType, iteration: int, array: np.ndarray) -> "Frame":
        arr = np.ascontiguousarray(array, dtype="<f4")
        return cls(MsgType(msg_type), iteration, tuple(int(d) for d in arr.shape), arr.tobytes())

    @classmethod
    def labels(cls, iteration: int, labels) -> "Frame":
        arr = np.ascontiguousarray(labels, dtype="<u4")
        return cls(MsgType.LABELS, iteration, (len(arr),), arr.tobytes())

    def array(self) -> np.ndarray:
        dtype = "<u4" if self.msg_type == MsgType.LABELS else "<f4"
        out = np.frombuffer(self.payload, dtype=dtype).reshape(self.dims)
        return out.astype(np.int64 if self.msg_type == MsgType.LABELS else np.float32)

    @property
    def wire_size(self) -> int:
        return header_size(len(self.dims)) + len(self.payload)


def header_size(ndim: int) -> int:
    """Bytes of framing around the payload (checksum included)."""
    return _HEAD.size + 4 * ndim + _LEN.size + _CRC.size


def _check_layout(msg_type: MsgType, dims, length: int) -> None:
    if msg_type in TENSOR_TYPES or msg_type == MsgType.LABELS:
        want = 4 * int(np.prod(dims, dtype=np.int64)) if dims else 4
        if msg_type == MsgType.LABELS and len(dims) != 1:
            raise MalformedFrame(f"LABELS frame must be 1-D, got dims {dims}")
        if length != want:
            raise MalformedFrame(f"{msg_type.name}: payload {length} bytes, dims {dims} need {want}")


def encode_frame(f: Frame) -> bytes:
    msg_type = MsgType(f.msg_type)
    if len(f.dims) > 255:
        raise MalformedFrame("too many dims")
    _check_layout(msg_type, f.dims, len(f.payload))
    return b"".join(
        [
            _HEAD.pack(MAGIC, int(msg_type), int(f.iteration), len(f.dims)),
            struct.pack(f"<{len(f.dims)}I", *f.dims),
            _LEN.pack(len(f.payload)),
            bytes(f.payload),
            _CRC.pack(zlib.crc32(f.payload) & 0xFFFFFFFF),
        ]
    )


def _parse(read) -> Frame:
    """Decode one frame using ``read(n)`` which may return fewer bytes at EOF."""
    head = read(_HEAD.size)
    if not head:
        raise ConnectionClosed("stream closed")
    if len(head) < _HEAD.size:
        if head[:4] != MAGIC[: len(head[:4])]:
            raise BadMagic(f"bad magic {head[:4]!r}")
        raise TruncatedFrame("stream ended inside frame header")
    magic, raw_type, iteration, ndim = _HEAD.unpack(head)
    if magic != MAGIC:
        raise BadMagic(f"bad magic {magic!r}")
    try:
        msg_type = MsgType(raw_type)
    except ValueError:
        raise UnknownMessageType(f"unknown msg_type {raw_type}") from None

    def exact(n, what):
        data = read(n)
        if len(data) < n:
            raise TruncatedFrame(f"stream ended inside {what}")
        return data

    dims = struct.unpack(f"<{ndim}I", exact(4 * ndim, "dims")) if ndim else ()
    (length,) = _LEN.unpack(exact(_LEN.size, "length"))
    _check_layout(msg_type, dims, length)
    payload = exact(length, "payload")
    (crc,) = _CRC.unpack(exact(_CRC.size, "checksum"))
    if crc != zlib.crc32(payload) & 0xFFFFFFFF:
        raise ChecksumMismatch(f"{msg_type.name} frame for iteration {iteration}: CRC mismatch")
    return Frame(msg_type, iteration, tuple(dims), payload)


def decode_frame(buf: bytes) -> Frame:
    """Decode exactly one frame from ``buf``."""
    view = memoryview(bytes(buf))
    pos = 0

    def read(n):
        nonlocal pos
        chunk = view[pos : pos + n].tobytes()
        pos += len(chunk)
        return chunk

    frame = _parse(read)
    if pos != len(view):
        raise MalformedFrame(f"{len(view) - pos} trailing bytes after frame")
    return frame


# --- transports ------------------------------------------------------------


class Transport:
    """Byte stream with exact send/receive counters."""

    def __init__(self):
        self.bytes_sent = 0
        self.bytes_received = 0

    def send(self, data: bytes) -> None:
        self._send(data)
        self.bytes_sent += len(data)

    def recv(self, n: int) -> bytes:
        """Read ``n`` bytes; fewer only if the peer closed the stream."""
        data = self._recv(n)
        self.bytes_received += len(data)
        return data

    def _send(self, data):
        raise NotImplementedError

    def _recv(self, n):
        raise NotImplementedError

    def close(self):
        pass


class _Pipe:
    def __init__(self):
        self.buf = bytearray()
        self.closed = False
        self.cond = threading.Condition()


class PipeTransport(Transport):
    """One end of an in-memory duplex pipe (see :func:`duplex_pipe`)."""

    def __init__(self, inbound: _Pipe, outbound: _Pipe, timeout: float | None = 60.0):
        super().__init__()
        self._in, self._out = inbound, outbound
        self.timeout = timeout

    def _send(self, data):
        with self._out.cond:
            if self._out.closed:
                raise ConnectionClosed("pipe closed")
            self._out.buf += data
            self._out.cond.notify_all()

    def _recv(self, n):
        pipe = self._in
        with pipe.cond:
            ok = pipe.cond.wait_for(lambda: len(pipe.buf) >= n or pipe.closed, self.timeout)
            if not ok:
                raise TimeoutError("pipe receive timed out")
            data = bytes(pipe.buf[:n])
            del pipe.buf[:n]
            return data

    def close(self):
        for pipe in (self._in, self._out):
            with pipe.cond:
                pipe.closed = True
                pipe.cond.notify_all()


def duplex_pipe(timeout: float | None = 60.0) -> tuple[PipeTransport, PipeTransport]:
    a_to_b, b_to_a = _Pipe(), _Pipe()
    return PipeTransport(b_to_a, a_to_b, timeout), PipeTransport(a_to_b, b_to_a, timeout)


class SocketTransport(Transport):
    def __init__(self, sock: socket.socket):
        super().__init__()
        self.sock = sock
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)

    def _send(self, data):
        try:
            self.sock.sendall(data)
        except (BrokenPipeError, ConnectionResetError) as exc:
            raise ConnectionClosed(str(exc)) from exc

    def _recv(self, n):
        chunks = []
        got = 0
        while got < n:
            try:
                chunk = self.sock.recv(min(n - got, 1 << 20))
            except ConnectionResetError:
                chunk = b""
            if not chunk:
                break
            chunks.append(chunk)
            got += len(chunk)
        return b"".join(chunks)

    def close(self):
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()


def connect(host: str, port: int = DEFAULT_PORT, timeout: float = 5.0) -> SocketTransport:
    sock = socket.create_connection((host, port), timeout=timeout)
    sock.settimeout(None)
    return SocketTransport(sock)


def listen(host: str = "127.0.0.1", port: int = DEFAULT_PORT) -> socket.socket:
    srv = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    srv.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    srv.bind((host, port))
    srv.listen(1)
    return srv


def accept(srv: socket.socket, timeout: float | None = None) -> SocketTransport:
    srv.settimeout(timeout)
    conn, _ = srv.accept()
    conn.settimeout(None)
    return SocketTransport(conn)


# --- bandwidth emulation ----------------------------------------------------


class Throttle:
    """Sender-side pacing: the link is busy for ``bytes*8/bandwidth`` per send.

    Sends queue behind each other, so cumulative time spent is never less
    than cumulative bytes over the link rate.
    """

    def __init__(self, bandwidth_bps: float, clock=time.monotonic, sleep=time.sleep):
        if not bandwidth_bps > 0:
            raise ValueError(f"bandwidth must be positive, got {bandwidth_bps}")
        self.bandwidth_bps = float(bandwidth_bps)
        self._clock, self._sleep = clock, sleep
        self._free_at: float | None = None

    def pace(self, nbytes: int) -> None:
        now = self._clock()
        start = now if self._free_at is None else max(now, self._free_at)
        self._free_at = start + nbytes * 8 / self.bandwidth_bps
        while True:
            delay = self._free_at - self._clock()
            if delay <= 0:
                return
            self._sleep(delay)


class Channel:
    """Frame-level endpoint over a :class:`Transport`, optionally throttled."""

    def __init__(self, transport: Transport, bandwidth_bps: float | None = None):
        self.transport = transport
        self.throttle = Throttle(bandwidth_bps) if bandwidth_bps else None

    @property
    def bytes_sent(self) -> int:
        return self.transport.bytes_sent

    @property
    def bytes_received(self) -> int:
        return self.transport.bytes_received

    def send_frame(self, frame: Frame) -> int:
        return throttled_send(self, frame)

    def recv_frame(self) -> Frame:
        return _parse(self.transport.recv)

    def close(self):
        self.transport.close()


def throttled_send(channel: Channel, frame: Frame) -> int:
    """Write ``frame`` and pace to the channel's bandwidth; returns wire bytes."""
    data = encode_frame(frame)
    channel.transport.send(data)
    if channel.throttle is not None:
        channel.throttle.pace(len(data))
    return len(data)


# --- session ----------------------------------------------------------------


@dataclass(frozen=True)
class SessionConfig:
    model_hash: int
    split_layer: int
    rank: int
    residual_mode: ResidualMode
    batch: int
    seq: int
    version: int = PROTOCOL_VERSION

    FIELDS = ("version", "model_hash", "split_layer", "rank", "residual_mode", "batch", "seq")
    _MODES = {m: i for i, m in enumerate(ResidualMode)}

    def encode(self) -> bytes:
        return _SESSION.pack(
            self.model_hash, self.split_layer, self.rank, self._MODES[self.residual_mode],
            self.batch, self.seq, self.version,
        )

    @classmethod
    def decode(cls, payload: bytes) -> "SessionConfig":
        if len(payload) != _SESSION.size:
            raise MalformedFrame(f"HELLO payload must be {_SESSION.size} bytes, got {len(payload)}")
        h, l, r, mode, b, s, v = _SESSION.unpack(payload)
        modes = list(ResidualMode)
        if mode >= len(modes):
            raise MalformedFrame(f"unknown residual mode id {mode}")
        return cls(h, l, r, modes[mode], b, s, v)

    def first_mismatch(self, other: "SessionConfig") -> str | None:
        for name in self.FIELDS:
            if getattr(self, name) != getattr(other, name):
                return name
        return None


class Session:
    """Lock-step protocol state machine for one side of a connection."""

    def __init__(self, role: str, channel: Channel):
        if role not in ("edge", "cloud"):
            raise ValueError(f"role must be 'edge' or 'cloud', got {role!r}")
        self.role = role
        self.channel = channel
        self.config: SessionConfig | None = None
        self.iteration = 0
        self.closed = False

    # handshake

    def handshake(self, cfg: SessionConfig) -> SessionConfig:
        if self.config is not None:
            raise ProtocolError("handshake already completed")
        if self.role == "edge":
            if cfg.residual_mode is ResidualMode.KEPT_LOCAL:
                raise HandshakeError("residual_mode", "kept_local cannot run over the wire")
            self.channel.send_frame(Frame(MsgType.HELLO, 0, (), cfg.encode()))
            ack = self._expect(MsgType.CONFIG_ACK)
            status, reason = ack.payload[:1], ack.payload[1:].decode(errors="replace")
            if status != b"\x00":
                field, _, msg = reason.partition(":")
                raise HandshakeError(field, msg.strip() or "rejected by cloud")
        else:
            hello = self._expect(MsgType.HELLO)
            theirs = SessionConfig.decode(hello.payload)
            field = cfg.first_mismatch(theirs)
            msg = None
            if field == "version":
                msg = f"protocol version {theirs.version} != {cfg.version}"
            elif field is not None:
                msg = f"edge has {getattr(theirs, field)}, cloud has {getattr(cfg, field)}"
            elif cfg.residual_mode is ResidualMode.KEPT_LOCAL:
                field, msg = "residual_mode", "kept_local cannot run over the wire"
            if field is not None:
                self.channel.send_frame(Frame(MsgType.CONFIG_ACK, 0, (), b"\x01" + f"{field}: {msg}".encode()))
                raise HandshakeError(field, msg)
            self.channel.send_frame(Frame(MsgType.CONFIG_ACK, 0, (), b"\x00"))
        self.config = cfg
        return cfg

    # edge side

    def send_forward(self, iteration: int, activation: np.ndarray, labels, residual: np.ndarray | None = None) -> int:
        """Ship one iteration's edge outputs; returns bytes written."""
        self._require("edge")
        self._next_iteration(iteration)
        sent = self.channel.send_frame(Frame.tensor(MsgType.ACTIVATION, iteration, activation))
        if self._with_residual():
            if residual is None:
                raise ProtocolError("session negotiated residual transfer but none given")
            sent += self.channel.send_frame(Frame.tensor(MsgType.RESIDUAL, iteration, residual))
        sent += self.channel.send_frame(Frame.labels(iteration, labels))
        return sent

    def recv_backward(self, iteration: int):
        """Returns ``(grad, residual_grad | None, (loss, acc, t_cloud_ms))``."""
        self._require("edge")
        grad = self._expect(MsgType.GRADIENT, iteration).array()
        res_grad = None
        if self._with_residual():
            res_grad = self._expect(MsgType.RESIDUAL, iteration).array()
        metrics = _METRICS.unpack(self._expect(MsgType.METRICS, iteration).payload)
        return grad, res_grad, metrics

    def shutdown(self) -> None:
        if not self.closed:
            self.channel.send_frame(Frame(MsgType.SHUTDOWN, self.iteration))
            self.closed = True

    # cloud side

    def recv_forward(self):
        """Returns ``(iteration, activation, residual | None, labels)`` or None on SHUTDOWN."""
        self._require("cloud")
        first = self.channel.recv_frame()
        if first.msg_type == MsgType.SHUTDOWN:
            self.closed = True
            return None
        if first.msg_type != MsgType.ACTIVATION:
            raise ProtocolError(f"expected ACTIVATION, got {first.msg_type.name}")
        it = first.iteration
        self._next_iteration(it)
        residual = None
        if self._with_residual():
            residual = self._expect(MsgType.RESIDUAL, it).array()
        labels = self._expect(MsgType.LABELS, it).array()
        return it, first.array(), residual, labels

    def send_backward(self, iteration: int, grad: np.ndarray, metrics: tuple[float, float, float],
                      residual_grad: np.ndarray | None = None) -> int:
        self._require("cloud")
        if iteration != self.iteration:
            raise ProtocolError(f"reply for iteration {iteration}, current is {self.iteration}")
        sent = self.channel.send_frame(Frame.tensor(MsgType.GRADIENT, iteration, grad))
        if self._with_residual():
            if residual_grad is None:
                raise ProtocolError("session negotiated residual transfer but no gradient given")
            sent += self.channel.send_frame(Frame.tensor(MsgType.RESIDUAL, iteration, residual_grad))
        sent += self.channel.send_frame(Frame(MsgType.METRICS, iteration, (), _METRICS.pack(*metrics)))
        return sent

    # helpers

    def _require(self, role):
        if self.role != role:
            raise ProtocolError(f"operation only valid on the {role} side")
        if self.config is None:
            raise ProtocolError("handshake not completed")

    def _with_residual(self):
        return self.config is not None and self.config.residual_mode is ResidualMode.KEPT_WITH_TRANSFER

    def _next_iteration(self, iteration):
        if iteration != self.iteration + 1:
            raise ProtocolError(f"out-of-order iteration {iteration}, expected {self.iteration + 1}")
        self.iteration = iteration

    def _expect(self, msg_type: MsgType, iteration: int | None = None) -> Frame:
        frame = self.channel.recv_frame()
        if frame.msg_type == MsgType.SHUTDOWN and msg_type != MsgType.SHUTDOWN:
            self.closed = True
            raise ConnectionClosed("peer sent SHUTDOWN")
        if frame.msg_type != msg_type:
            raise ProtocolError(f"expected {msg_type.name}, got {frame.msg_type.name}")
        if iteration is not None and frame.iteration != iteration:
            raise ProtocolError(f"{msg_type.name} for iteration {frame.iteration}, expected {iteration}")
        return frame


def handshake(role: str, cfg: SessionConfig, channel: Channel) -> Session:
    """Open a :class:`Session` and negotiate ``cfg`` with the peer."""
    session = Session(role, channel)
    session.handshake(cfg)
    return session
