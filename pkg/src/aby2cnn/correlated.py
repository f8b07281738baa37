"""Correlated randomness for multiplicative gates.

Two interchangeable backends feed the protocol engine:

* :class:`Dealer` -- an in-process trusted dealer standing in for the
  oblivious-transfer step of the setup phase.
* :class:`HelperServer` / :class:`HelperClient` -- a third, semi-honest node
  reached over the wire.  It sees only δ parts and answers with a fresh
  additive split of the cross terms.

Both route requests through :func:`serve_pair`, and both draw their
splitting randomness from a stream keyed by ``(seed, op_id)``, so with the
same seed they hand out identical parts.
"""

from __future__ import annotations

import enum
import logging
import struct
import threading
from collections import deque
from dataclasses import dataclass

import numpy as np

from aby2cnn.conv import ConvParams, conv2d_ring
from aby2cnn.errors import ProtocolError, ShapeError, TransportError
from aby2cnn.net import Channel, Msg, Role, SessionConfig, connect, pack_tensor, unpack_tensor
from aby2cnn.party import random_words
from aby2cnn.ring import U64, from_words, to_words

log = logging.getLogger(__name__)


class GateKind(enum.IntEnum):
    HADAMARD = 1
    MATMUL = 2
    CONV = 3
    BOOL_TRIPLE = 4
    ARITH_TRIPLE = 5


@dataclass(frozen=True)
class CrossRequest:
    """What one compute party sends for one op: only δ parts, never Δ."""

    kind: GateKind
    a_part: np.ndarray | None = None
    b_part: np.ndarray | None = None
    params: ConvParams | None = None
    count: int = 0

    def encode(self) -> bytes:
        out = struct.pack("<B", int(self.kind))
        if self.kind in (GateKind.BOOL_TRIPLE, GateKind.ARITH_TRIPLE):
            return out + struct.pack("<Q", self.count)
        if self.kind == GateKind.CONV:
            p = self.params
            out += struct.pack("<4I2I4I", p.n_ker, p.k_row, p.k_col, p.i_ch, *p.strides, *p.padding)
        return out + pack_tensor(self.a_part) + pack_tensor(self.b_part)

    @classmethod
    def decode(cls, buf: bytes) -> "CrossRequest":
        try:
            kind = GateKind(buf[0])
        except (ValueError, IndexError) as exc:
            raise ProtocolError(f"bad gate kind in CROSS_REQ: {exc}") from exc
        if kind in (GateKind.BOOL_TRIPLE, GateKind.ARITH_TRIPLE):
            (count,) = struct.unpack_from("<Q", buf, 1)
            return cls(kind, count=count)
        off = 1
        params = None
        if kind == GateKind.CONV:
            v = struct.unpack_from("<4I2I4I", buf, off)
            params = ConvParams(*v[:4], strides=v[4:6], padding=v[6:10])
            off += struct.calcsize("<4I2I4I")
        a, off = unpack_tensor(buf, off)
        b, _ = unpack_tensor(buf, off)
        return cls(kind, a, b, params)

    def signature(self):
        shapes = None if self.a_part is None else (self.a_part.shape, self.b_part.shape)
        return self.kind, shapes, self.params, self.count


def structured_product(kind: GateKind, a: np.ndarray, b: np.ndarray, params: ConvParams | None = None):
    """The gate's bilinear map: elementwise, matrix product, or convolution (kernels ⋆ input)."""
    if kind == GateKind.HADAMARD:
        if a.shape != b.shape:
            raise ShapeError(f"Hadamard operands {a.shape} vs {b.shape}")
        return a * b
    if kind == GateKind.MATMUL:
        if a.shape[-1] != b.shape[-2]:
            raise ShapeError(f"matmul inner dims {a.shape} @ {b.shape}")
        return np.matmul(a, b)
    if kind == GateKind.CONV:
        return conv2d_ring(a, b, params)
    raise ShapeError(f"{kind!r} has no structured product")


def _split(value: np.ndarray, rng_key) -> tuple[np.ndarray, np.ndarray]:
    r = random_words(value.shape, *rng_key)
    return r, value - r


def dealer_cross_terms(kind, delta_a, delta_b, seed: int, op_id: int = 0, params=None):
    """Additive two-party split of the full structured product ``δ_a ⋆ δ_b``."""
    prod = structured_product(GateKind(kind), np.asarray(delta_a, U64), np.asarray(delta_b, U64), params)
    return _split(prod, (seed, 0x63726F73, op_id))


def dealer_bool_triples(nwords: int, seed: int, op_id: int = 0):
    """XOR-shared AND triples, 64 per word: returns ``((a0,b0,c0), (a1,b1,c1))``."""
    key = (seed, 0x626F6F6C, op_id)
    a, b, a0, b0, c0 = (random_words((5, nwords), *key))
    c = a & b
    return (a0, b0, c0), (a ^ a0, b ^ b0, c ^ c0)


def dealer_arith_triples(count: int, seed: int, op_id: int = 0):
    """Additively shared ``(a, b, a*b mod 2^64)`` triples."""
    key = (seed, 0x61726974, op_id)
    a, b, a0, b0, c0 = (random_words((5, count), *key))
    c = a * b
    return (a0, b0, c0), (a - a0, b - b0, c - c0)


def serve_pair(req0: CrossRequest, req1: CrossRequest, seed: int, op_id: int):
    """Answer a matched pair of requests; returns the response for each party.

    For multiplicative gates the response is party i's share of the cross
    terms ``[δ_a]_0 ⋆ [δ_b]_1 + [δ_a]_1 ⋆ [δ_b]_0``.
    """
    if req0.signature() != req1.signature():
        raise ProtocolError(f"op {op_id}: parties requested different gates "
                            f"({req0.kind.name} vs {req1.kind.name})")
    kind = req0.kind
    if kind == GateKind.BOOL_TRIPLE:
        return dealer_bool_triples(req0.count, seed, op_id)
    if kind == GateKind.ARITH_TRIPLE:
        return dealer_arith_triples(req0.count, seed, op_id)
    cross = (structured_product(kind, req0.a_part, req1.b_part, req0.params)
             + structured_product(kind, req1.a_part, req0.b_part, req0.params))
    return _split(cross, (seed, 0x63726F73, op_id))


class _Rendezvous:
    """Pairs the two parties' requests in arrival order and checks op ids agree."""

    def __init__(self, seed: int):
        self.seed = seed
        self._cond = threading.Condition()
        self._queues = (deque(), deque())
        self._answers: dict[tuple[int, int], object] = {}
        self._error: Exception | None = None

    def submit(self, party: int, op_id: int, req: CrossRequest):
        with self._cond:
            self._queues[party].append((op_id, req))
            self._match()
            while (party, op_id) not in self._answers and self._error is None:
                self._cond.wait()
            if (party, op_id) in self._answers:
                return self._answers.pop((party, op_id))
            raise self._error

    def _match(self):
        q0, q1 = self._queues
        while q0 and q1 and self._error is None:
            (op0, r0), (op1, r1) = q0.popleft(), q1.popleft()
            if op0 != op1:
                self._error = ProtocolError(f"op id desync: party 0 at {op0}, party 1 at {op1}")
                break
            try:
                resp0, resp1 = serve_pair(r0, r1, self.seed, op0)
            except Exception as exc:  # noqa: BLE001 -- surfaced to both parties
                self._error = exc
                break
            self._answers[(0, op0)] = resp0
            self._answers[(1, op1)] = resp1
        self._cond.notify_all()

    def fail(self, exc: Exception):
        with self._cond:
            self._error = exc
            self._cond.notify_all()


class Dealer:
    """In-process trusted dealer shared by both party threads."""

    def __init__(self, seed: int = 0):
        self.seed = seed
        self._rv = _Rendezvous(seed)

    def backend(self, party: int) -> "DealerBackend":
        return DealerBackend(self, party)


class _BackendBase:
    """Party-side API the protocol engine talks to."""

    party: int

    def _request(self, op_id: int, req: CrossRequest):
        raise NotImplementedError

    def cross_terms(self, op_id, kind, a_part, b_part, params=None) -> np.ndarray:
        """This party's additive part of the full product ``δ_a ⋆ δ_b``."""
        local = structured_product(GateKind(kind), a_part, b_part, params)
        return local + self._request(op_id, CrossRequest(GateKind(kind), a_part, b_part, params))

    def bool_triples(self, op_id: int, nwords: int):
        return self._request(op_id, CrossRequest(GateKind.BOOL_TRIPLE, count=nwords))

    def arith_triples(self, op_id: int, count: int):
        return self._request(op_id, CrossRequest(GateKind.ARITH_TRIPLE, count=count))

    def close(self):
        pass


class DealerBackend(_BackendBase):
    def __init__(self, dealer: Dealer, party: int):
        self.dealer = dealer
        self.party = party

    def _request(self, op_id, req):
        # the wire encoding is skipped in-process but requests are still δ-only
        return self.dealer._rv.submit(self.party, op_id, req)


class HelperClient(_BackendBase):
    """Compute-party side of the helper connection.

    Pass either an established ``channel`` or an ``address`` (with a
    :class:`SessionConfig`) to connect lazily on the first request.
    """

    def __init__(self, party: int, channel: Channel | None = None, address=None,
                 session_cfg: SessionConfig | None = None, retry_for: float = 0.0):
        self.party = party
        self.channel = channel
        self.address = address
        self.session_cfg = session_cfg
        self.retry_for = retry_for

    def _ensure(self) -> Channel:
        if self.channel is None:
            if self.address is None:
                raise TransportError("helper backend has neither a channel nor an address")
            sess = connect(self.address, self.session_cfg, expect=Role.HELPER, retry_for=self.retry_for,
                           name=f"party{self.party}->helper")
            self.channel = sess.channel
        return self.channel

    def _request(self, op_id, req):
        ch = self._ensure()
        ch.send(Msg.CROSS_REQ, op_id, req.encode())
        buf = ch.recv(Msg.CROSS_RESP, op_id)
        if req.kind == GateKind.BOOL_TRIPLE:
            w = from_words(buf).reshape(3, req.count)
            return w[0], w[1], w[2]
        if req.kind == GateKind.ARITH_TRIPLE:
            w = from_words(buf).reshape(3, req.count)
            return w[0], w[1], w[2]
        arr, _ = unpack_tensor(buf)
        return arr

    def close(self):
        if self.channel is not None:
            self.channel.close()


def _encode_response(kind: GateKind, resp) -> bytes:
    if kind in (GateKind.BOOL_TRIPLE, GateKind.ARITH_TRIPLE):
        return b"".join(to_words(x) for x in resp)
    return pack_tensor(resp)


class HelperServer:
    """Third-party helper node serving both compute parties.

    One reader thread per party connection; requests are paired in order
    and each party receives only its own share of the answer.  Every frame
    the helper receives is appended to ``transcript`` when one is given.
    """

    def __init__(self, channels: tuple[Channel, Channel], seed: int = 0):
        self.channels = channels
        self.seed = seed
        self._rv = _Rendezvous(seed)
        self._threads: list[threading.Thread] = []
        self.errors: list[Exception] = []

    def _serve_party(self, party: int):
        ch = self.channels[party]
        try:
            while True:
                try:
                    fr = ch.recv_frame()
                except TransportError:
                    return
                if fr.msg_type != Msg.CROSS_REQ:
                    raise ProtocolError(f"helper got unexpected {Msg(fr.msg_type).name} from party {party}")
                req = CrossRequest.decode(fr.payload)
                resp = self._rv.submit(party, fr.op_id, req)
                ch.send(Msg.CROSS_RESP, fr.op_id, _encode_response(req.kind, resp))
        except Exception as exc:  # noqa: BLE001 -- reported via errors and ABORT
            log.error("helper: party %d: %s", party, exc)
            self.errors.append(exc)
            self._rv.fail(exc)
            for c in self.channels:
                c.abort(str(exc))

    def start(self) -> "HelperServer":
        for party in (0, 1):
            t = threading.Thread(target=self._serve_party, args=(party,), daemon=True,
                                 name=f"helper-party{party}")
            t.start()
            self._threads.append(t)
        return self

    def join(self, timeout: float | None = None):
        for t in self._threads:
            t.join(timeout)

    def close(self):
        for c in self.channels:
            c.close()
        self.join(5)
