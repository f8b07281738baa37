"""Wire protocol: length-prefixed frames over one ordered byte stream per peer.

Frame layout (little-endian)::

    u32 length | u8 msg_type | u64 op_id | payload[length]

``length`` counts payload bytes only.  Receivers match frames to waiting
operations by ``(msg_type, op_id)``; frames that arrive early are parked
in per-key FIFO queues.
"""

from __future__ import annotations

import enum
import logging
import socket
import struct
import time
from collections import defaultdict, deque
from dataclasses import dataclass, field

import numpy as np

from aby2cnn.errors import FramingError, HandshakeError, ProtocolError, TransportError
from aby2cnn.ring import DEFAULT_CONFIG, FixedPointConfig, from_words, to_words

log = logging.getLogger(__name__)

PROTOCOL_VERSION = 1
HEADER = struct.Struct("<IBQ")
MAX_PAYLOAD = (1 << 31) - 1


class Msg(enum.IntEnum):
    PING = 1
    SHARE_PUSH = 2
    RESHARE = 3
    BOOL_ROUND = 4
    CROSS_REQ = 5
    CROSS_RESP = 6
    RESULT_PUSH = 7
    ABORT = 8


class Role(enum.IntEnum):
    SERVER0 = 0
    SERVER1 = 1
    HELPER = 2
    IMAGE_PROVIDER = 3
    MODEL_PROVIDER = 4


@dataclass(frozen=True)
class Frame:
    msg_type: int
    op_id: int = 0
    payload: bytes = b""

    def encode(self) -> bytes:
        if self.msg_type not in Msg._value2member_map_:
            raise FramingError(f"unregistered message type {self.msg_type}")
        if len(self.payload) > MAX_PAYLOAD:
            raise FramingError("payload exceeds 2^31-1 bytes")
        return HEADER.pack(len(self.payload), self.msg_type, self.op_id) + bytes(self.payload)

    @classmethod
    def decode(cls, buf: bytes) -> "Frame":
        if len(buf) < HEADER.size:
            raise FramingError(f"short frame: {len(buf)} bytes")
        length, msg_type, op_id = HEADER.unpack_from(buf)
        if length != len(buf) - HEADER.size:
            raise FramingError(f"length field {length} != payload size {len(buf) - HEADER.size}")
        if msg_type not in Msg._value2member_map_:
            raise FramingError(f"unregistered message type {msg_type}")
        return cls(msg_type, op_id, bytes(buf[HEADER.size:]))


@dataclass
class ChannelStats:
    frames_sent: int = 0
    bytes_sent: int = 0
    frames_recv: int = 0
    bytes_recv: int = 0


class Channel:
    """Framed, ordered connection to one peer.

    Not thread-safe for concurrent readers; the protocol engine uses one
    logical schedule per channel.  ``transcript``, when a list, receives
    ``("send" | "recv", raw_frame_bytes)`` tuples.
    """

    def __init__(self, sock: socket.socket, name: str = "", transcript: list | None = None):
        self.sock = sock
        self.name = name
        self.transcript = transcript
        self.stats = ChannelStats()
        self.failed = False
        self._pending: dict[tuple[int, int], deque] = defaultdict(deque)

    # -- raw I/O ----------------------------------------------------------
    def _read_exact(self, n: int, *, at_boundary: bool = False) -> bytes:
        buf = bytearray(n)
        view = memoryview(buf)
        got = 0
        while got < n:
            try:
                k = self.sock.recv_into(view[got:], n - got)
            except socket.timeout as exc:
                self.failed = True
                raise TransportError(f"{self.name}: receive timed out") from exc
            except OSError as exc:
                self.failed = True
                raise TransportError(f"{self.name}: {exc}") from exc
            if k == 0:
                self.failed = True
                if at_boundary and got == 0:
                    raise TransportError(f"{self.name}: connection closed by peer")
                raise FramingError(f"{self.name}: stream truncated after {got} of {n} bytes")
            got += k
        return bytes(buf)

    def send_frame(self, frame: Frame) -> None:
        if self.failed:
            raise TransportError(f"{self.name}: channel marked failed")
        raw = frame.encode()
        try:
            self.sock.sendall(raw)
        except OSError as exc:
            self.failed = True
            raise TransportError(f"{self.name}: {exc}") from exc
        self.stats.frames_sent += 1
        self.stats.bytes_sent += len(raw)
        if self.transcript is not None:
            self.transcript.append(("send", raw))

    def _read_frame(self) -> Frame:
        head = self._read_exact(HEADER.size, at_boundary=True)
        length, msg_type, op_id = HEADER.unpack(head)
        if msg_type not in Msg._value2member_map_:
            self.failed = True
            raise FramingError(f"{self.name}: unregistered message type {msg_type}")
        payload = self._read_exact(length) if length else b""
        self.stats.frames_recv += 1
        self.stats.bytes_recv += HEADER.size + length
        if self.transcript is not None:
            self.transcript.append(("recv", head + payload))
        return Frame(msg_type, op_id, payload)

    def recv_frame(self, msg_type: int | None = None, op_id: int | None = None) -> Frame:
        """Next frame matching the filter; ``None`` fields match anything."""
        if msg_type is not None and op_id is not None:
            q = self._pending.get((msg_type, op_id))
            if q:
                return q.popleft()
        elif self._pending:
            for key, q in self._pending.items():
                if q and (msg_type is None or key[0] == msg_type) and (op_id is None or key[1] == op_id):
                    return q.popleft()
        while True:
            fr = self._read_frame()
            if fr.msg_type == Msg.ABORT and msg_type != Msg.ABORT:
                self.failed = True
                raise ProtocolError(f"{self.name}: peer aborted: {fr.payload.decode(errors='replace')}")
            if (msg_type is None or fr.msg_type == msg_type) and (op_id is None or fr.op_id == op_id):
                return fr
            self._pending[(fr.msg_type, fr.op_id)].append(fr)

    # -- convenience ------------------------------------------------------
    def send(self, msg_type: int, op_id: int = 0, payload: bytes = b"") -> None:
        self.send_frame(Frame(int(msg_type), op_id, payload))

    def recv(self, msg_type: int, op_id: int = 0) -> bytes:
        return self.recv_frame(int(msg_type), op_id).payload

    def has_pending(self) -> bool:
        return any(self._pending.values())

    def abort(self, reason: str) -> None:
        try:
            self.send(Msg.ABORT, 0, reason.encode()[:1024])
        except TransportError:
            pass

    def close(self) -> None:
        # shutdown first so a reader blocked in recv on another thread wakes up
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        try:
            self.sock.close()
        except OSError:
            pass


def channel_pair(names=("a", "b"), transcripts=(None, None)) -> tuple[Channel, Channel]:
    """Two connected in-process channels over a socketpair."""
    s0, s1 = socket.socketpair()
    return Channel(s0, names[0], transcripts[0]), Channel(s1, names[1], transcripts[1])


# -- tensor payloads ------------------------------------------------------
def pack_tensor(x: np.ndarray) -> bytes:
    """``u8 ndims | u32 dims... | u64 words`` (row-major)."""
    dims = x.shape
    return struct.pack(f"<B{len(dims)}I", len(dims), *dims) + to_words(x)


def unpack_tensor(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    (nd,) = struct.unpack_from("<B", buf, offset)
    dims = struct.unpack_from(f"<{nd}I", buf, offset + 1)
    offset += 1 + 4 * nd
    count = int(np.prod(dims)) if nd else 1
    if len(buf) < offset + 8 * count:
        raise FramingError("tensor payload shorter than its dims")
    arr = from_words(buf, count, offset).reshape(dims)
    return arr, offset + 8 * count


# -- sessions -------------------------------------------------------------
HELLO = struct.Struct("<HQBQB")


@dataclass
class SessionConfig:
    role: Role
    peers: dict = field(default_factory=dict)  # Role -> (host, port)
    session_id: int = 1
    seed: int | None = None
    fixed_point: FixedPointConfig = DEFAULT_CONFIG
    timeout: float = 30.0


@dataclass
class Session:
    channel: Channel
    local_role: Role
    peer_role: Role
    config: SessionConfig


def handshake(channel: Channel, cfg: SessionConfig, expect: Role | set | None = None) -> Role:
    """Exchange version, session id and fixed-point config; return the peer's role."""
    fp = cfg.fixed_point
    channel.send(Msg.PING, 0, HELLO.pack(PROTOCOL_VERSION, cfg.session_id, fp.f, fp.K, int(cfg.role)))
    payload = channel.recv(Msg.PING, 0)
    if len(payload) != HELLO.size:
        raise HandshakeError(f"malformed hello ({len(payload)} bytes)")
    version, sid, f, K, role = HELLO.unpack(payload)
    problems = []
    if version != PROTOCOL_VERSION:
        problems.append(f"protocol version {version} != {PROTOCOL_VERSION}")
    if sid != cfg.session_id:
        problems.append(f"session id {sid} != {cfg.session_id}")
    if (f, K) != (fp.f, fp.K):
        problems.append(f"fixed-point config f={f},K={K} != f={fp.f},K={fp.K}")
    try:
        peer = Role(role)
    except ValueError:
        problems.append(f"unknown role {role}")
        peer = None
    if peer is not None and expect is not None:
        allowed = expect if isinstance(expect, set) else {expect}
        if peer not in allowed:
            problems.append(f"unexpected peer role {peer.name}")
    if problems:
        msg = "; ".join(problems)
        channel.abort(msg)
        raise HandshakeError(msg)
    return peer


def connect(addr: tuple[str, int], cfg: SessionConfig, expect: Role | None = None,
            retry_for: float = 0.0, name: str = "", transcript: list | None = None) -> Session:
    """Dial ``addr`` (retrying up to ``retry_for`` seconds) and handshake."""
    deadline = time.monotonic() + retry_for
    while True:
        try:
            sock = socket.create_connection(addr, timeout=cfg.timeout)
            break
        except OSError as exc:
            if time.monotonic() >= deadline:
                raise TransportError(f"cannot reach {addr[0]}:{addr[1]}: {exc}") from exc
            time.sleep(0.05)
    sock.settimeout(cfg.timeout)
    sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    ch = Channel(sock, name or f"{cfg.role.name}->{addr[0]}:{addr[1]}", transcript)
    peer = handshake(ch, cfg, expect)
    return Session(ch, cfg.role, peer, cfg)


def listener(addr: tuple[str, int]) -> socket.socket:
    srv = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    srv.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    srv.bind(addr)
    srv.listen(8)
    return srv


def accept(srv: socket.socket, cfg: SessionConfig, expect: Role | set | None = None,
           transcript: list | None = None) -> Session:
    srv.settimeout(cfg.timeout)
    try:
        sock, peer_addr = srv.accept()
    except socket.timeout as exc:
        raise TransportError("timed out waiting for a peer to connect") from exc
    sock.settimeout(cfg.timeout)
    sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    ch = Channel(sock, f"{cfg.role.name}<-{peer_addr[0]}:{peer_addr[1]}", transcript)
    peer = handshake(ch, cfg, expect)
    ch.name = f"{cfg.role.name}<-{peer.name}"
    return Session(ch, cfg.role, peer, cfg)


def establish(cfg: SessionConfig, channel: Channel, expect: Role | set | None = None) -> Session:
    """Handshake over an already-connected channel."""
    peer = handshake(channel, cfg, expect)
    return Session(channel, cfg.role, peer, cfg)


# -- provider traffic -----------------------------------------------------
def provider_upload(session: Session, name: str, share) -> None:
    """Push one named share tensor (public and private parts) to a compute server."""
    if session.peer_role not in (Role.SERVER0, Role.SERVER1):
        raise ProtocolError(f"shares may only be pushed to compute servers, not {session.peer_role.name}")
    if share.party != int(session.peer_role):
        raise ProtocolError(f"share for party {share.party} pushed to {session.peer_role.name}")
    raw = name.encode()
    payload = struct.pack("<H", len(raw)) + raw + pack_tensor(share.delta_pub) + pack_tensor(share.delta_priv)
    session.channel.send(Msg.SHARE_PUSH, 0, payload)


def receive_upload(session: Session, party: int):
    from aby2cnn.sharing import ShareTensor

    payload = session.channel.recv(Msg.SHARE_PUSH, 0)
    (n,) = struct.unpack_from("<H", payload, 0)
    name = payload[2:2 + n].decode()
    pub, off = unpack_tensor(payload, 2 + n)
    priv, _ = unpack_tensor(payload, off)
    return name, ShareTensor(pub, priv, party)


def push_result(session: Session, share) -> None:
    if session.peer_role != Role.IMAGE_PROVIDER:
        raise ProtocolError(f"results go to the image provider, not {session.peer_role.name}")
    session.channel.send(Msg.RESULT_PUSH, 0, struct.pack("<B", share.party)
                         + pack_tensor(share.delta_pub) + pack_tensor(share.delta_priv))


def result_download(sessions) -> np.ndarray:
    """At the image provider: collect both servers' label shares and reconstruct."""
    from aby2cnn.sharing import ShareTensor, reconstruct

    got = {}
    for s in sessions:
        payload = s.channel.recv(Msg.RESULT_PUSH, 0)
        party = payload[0]
        if party != int(s.peer_role):
            raise ProtocolError(f"{s.peer_role.name} pushed a share labelled party {party}")
        pub, off = unpack_tensor(payload, 1)
        priv, _ = unpack_tensor(payload, off)
        got[party] = ShareTensor(pub, priv, party)
    if set(got) != {0, 1}:
        raise ProtocolError("need one result share from each compute server")
    return reconstruct(got[0], got[1])
