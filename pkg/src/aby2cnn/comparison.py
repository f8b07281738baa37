"""Sign-bit extraction and ReLU over ABY2.0 shares.

The sign of ``x = x_0 + x_1`` is bit 63 of a 64-bit boolean adder whose
operands are the parties' additive parts, each known to one party only.
The adder runs GMW-style on XOR shares with one AND triple per gate; all
elements of a tensor advance through the carry chain together, packed 64
bits per word.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from aby2cnn.errors import ProtocolError, ResourceError
from aby2cnn.net import Msg
from aby2cnn.ring import U64, from_words, to_words
from aby2cnn.sharing import ShareTensor, reshare

WORD_BITS = 64


@dataclass(frozen=True, eq=False)
class BoolShareVector:
    words: np.ndarray  # uint64, element k sits at bit k % 64 of word k // 64
    length: int
    party: int

    def bits(self) -> np.ndarray:
        return unpack_bits(self.words, self.length)


def pack_bits(bits: np.ndarray) -> np.ndarray:
    """0/1 array of shape ``(..., n)`` -> uint64 words ``(..., ceil(n/64))``."""
    bits = np.asarray(bits, dtype=np.uint8)
    n = bits.shape[-1]
    nwords = -(-n // WORD_BITS)
    padded = np.zeros(bits.shape[:-1] + (nwords * WORD_BITS,), dtype=np.uint8)
    padded[..., :n] = bits
    packed = np.packbits(padded, axis=-1, bitorder="little")
    return packed.view("<u8").astype(U64)


def unpack_bits(words: np.ndarray, n: int) -> np.ndarray:
    raw = np.ascontiguousarray(words, dtype="<u8").view(np.uint8)
    return np.unpackbits(raw, axis=-1, bitorder="little")[..., :n]


def bit_planes(v: np.ndarray) -> np.ndarray:
    """``(64, nwords)`` packed bit planes of a flat uint64 vector."""
    out = np.empty((WORD_BITS, -(-v.size // WORD_BITS)), dtype=U64)
    for j in range(WORD_BITS):
        out[j] = pack_bits(((v >> U64(j)) & U64(1)).astype(np.uint8))
    return out


class _TripleStream:
    def __init__(self, triples, need: int):
        a, b, c = triples
        if a.size < need:
            raise ResourceError(f"need {need} triple words, got {a.size}")
        self.a, self.b, self.c = a, b, c
        self.pos = 0

    def take(self, n: int):
        lo, hi = self.pos, self.pos + n
        if hi > self.a.size:
            raise ResourceError("boolean triples exhausted")
        self.pos = hi
        return self.a[lo:hi], self.b[lo:hi], self.c[lo:hi]


def _and(ctx, x: np.ndarray, y: np.ndarray, stream: _TripleStream) -> np.ndarray:
    """One GMW AND round on XOR-shared word arrays of equal shape."""
    shape = x.shape
    ta, tb, tc = (t.reshape(shape) for t in stream.take(x.size))
    d = x ^ ta
    e = y ^ tb
    op = ctx.next_op()
    peer = from_words(ctx.exchange(Msg.BOOL_ROUND, op, to_words(d) + to_words(e)))
    if peer.size != 2 * x.size:
        raise ProtocolError(f"BOOL_ROUND {op}: peer sent {peer.size} words, expected {2 * x.size}")
    D = d ^ peer[:x.size].reshape(shape)
    E = e ^ peer[x.size:].reshape(shape)
    z = tc ^ (D & tb) ^ (E & ta)
    if ctx.index == 0:
        z ^= D & E
    return z


def msb_extract(ctx, x: ShareTensor, lookahead: bool | None = None) -> BoolShareVector:
    """XOR shares of the two's-complement sign bit of every element of ``x``."""
    lookahead = ctx.lookahead if lookahead is None else lookahead
    n = x.size
    v = x.additive_part().ravel()
    planes = bit_planes(v)  # this party's operand bits
    zero = np.zeros_like(planes)
    # party 0 owns operand a, party 1 owns operand b
    a, b = (planes, zero) if ctx.index == 0 else (zero, planes)
    nwords = planes.shape[1]
    if lookahead:
        carry63 = _carry_kogge_stone(ctx, a, b, nwords)
    else:
        carry63 = _carry_ripple(ctx, a, b, nwords)
    sign = a[63] ^ b[63] ^ carry63
    return BoolShareVector(sign, n, ctx.index)


def _carry_ripple(ctx, a, b, nwords):
    op = ctx.next_op()
    stream = _TripleStream(ctx.backend.bool_triples(op, 63 * nwords), 63 * nwords)
    c = np.zeros(nwords, dtype=U64)
    for j in range(63):
        # carry_{j+1} = maj(a_j, b_j, c_j) = ((a_j ^ c_j) & (b_j ^ c_j)) ^ c_j
        c = _and(ctx, a[j] ^ c, b[j] ^ c, stream) ^ c
    return c


def _carry_kogge_stone(ctx, a, b, nwords):
    """Parallel-prefix carry into bit 63 in 1 + 6 AND rounds."""
    need = 63 * nwords + sum(2 * (63 - d) * nwords for d in (1, 2, 4, 8, 16, 32))
    op = ctx.next_op()
    stream = _TripleStream(ctx.backend.bool_triples(op, need), need)
    g = _and(ctx, a[:63], b[:63], stream)
    p = a[:63] ^ b[:63]
    for d in (1, 2, 4, 8, 16, 32):
        lo_g, lo_p = g[:-d], p[:-d]
        hi_p = p[d:]
        both = _and(ctx, np.concatenate([hi_p, hi_p]), np.concatenate([lo_g, lo_p]), stream)
        k = hi_p.shape[0]
        g = np.concatenate([g[:d], g[d:] ^ both[:k]])
        p = np.concatenate([p[:d], both[k:]])
    return g[62]


def beaver_mul(ctx, x_part: np.ndarray, y_part: np.ndarray) -> np.ndarray:
    """Elementwise product of additively shared vectors with one arithmetic triple each."""
    n = x_part.size
    op = ctx.next_op()
    ta, tb, tc = ctx.backend.arith_triples(op, n)
    d = x_part.ravel() - ta
    e = y_part.ravel() - tb
    op = ctx.next_op()
    peer = from_words(ctx.exchange(Msg.RESHARE, op, to_words(d) + to_words(e)))
    D = d + peer[:n]
    E = e + peer[n:]
    z = tc + D * tb + E * ta
    if ctx.index == 0:
        z = z + D * E
    return z.reshape(x_part.shape)


def bit_to_arith(ctx, b: BoolShareVector) -> np.ndarray:
    """Additive parts of ``b`` as ring elements: ``b_0 + b_1 - 2 b_0 b_1``."""
    mine = b.bits().astype(U64)
    zero = np.zeros_like(mine)
    x, y = (mine, zero) if ctx.index == 0 else (zero, mine)
    prod = beaver_mul(ctx, x, y)
    return mine - U64(2) * prod


def secure_relu(ctx, x: ShareTensor) -> ShareTensor:
    """``max(x, 0)`` elementwise, bit-exact, returned in fresh ABY2.0 form."""
    sign = msb_extract(ctx, x)
    sign_parts = bit_to_arith(ctx, sign)
    keep = (U64(1) if ctx.index == 0 else U64(0)) - sign_parts
    y = beaver_mul(ctx, x.additive_part().ravel(), keep)
    return reshare(ctx, y.reshape(x.shape))
