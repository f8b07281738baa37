"""ABY2.0 arithmetic shares: ``x = Δ - δ`` with ``δ = [δ]_0 + [δ]_1``.

Each party holds the public ``Δ`` and its private ``[δ]_i``.  Gate outputs
first exist as additive parts (one per party, summing to the value) and
are brought back into ABY2.0 form by :func:`reshare`.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from aby2cnn.errors import ParseError, ProtocolError, ShapeError
from aby2cnn.net import Msg, pack_tensor, unpack_tensor
from aby2cnn.party import random_words
from aby2cnn.ring import DEFAULT_CONFIG, U64, as_ring


@dataclass(frozen=True, eq=False)
class ShareTensor:
    delta_pub: np.ndarray
    delta_priv: np.ndarray
    party: int

    def __post_init__(self):
        if self.delta_pub.shape != self.delta_priv.shape:
            raise ShapeError(f"Δ shape {self.delta_pub.shape} != δ shape {self.delta_priv.shape}")
        if self.party not in (0, 1):
            raise ValueError(f"party must be 0 or 1, got {self.party}")

    @property
    def shape(self) -> tuple:
        return self.delta_pub.shape

    @property
    def size(self) -> int:
        return self.delta_pub.size

    def __getitem__(self, idx) -> "ShareTensor":
        return ShareTensor(self.delta_pub[idx], self.delta_priv[idx], self.party)

    def reshape(self, *shape) -> "ShareTensor":
        return ShareTensor(self.delta_pub.reshape(*shape), self.delta_priv.reshape(*shape), self.party)

    def additive_part(self) -> np.ndarray:
        """This party's additive part of x: ``Δ - [δ]_0`` at party 0, ``-[δ]_1`` at party 1."""
        if self.party == 0:
            return self.delta_pub - self.delta_priv
        return np.negative(self.delta_priv)


def concat(shares, axis: int = 0) -> ShareTensor:
    shares = list(shares)
    if not shares:
        raise ShapeError("nothing to concatenate")
    party = shares[0].party
    if any(s.party != party for s in shares):
        raise ProtocolError("cannot concatenate shares of different parties")
    return ShareTensor(np.concatenate([s.delta_pub for s in shares], axis),
                       np.concatenate([s.delta_priv for s in shares], axis), party)


def make_shares(clear, seed: int | None = None, masks=None) -> tuple[ShareTensor, ShareTensor]:
    """Split a clear ring tensor into the two parties' ABY2.0 shares.

    ``masks`` forces ``([δ]_0, [δ]_1)``; otherwise both are drawn uniformly
    from a stream keyed by ``seed`` (fresh OS entropy when ``seed`` is None).
    """
    clear = as_ring(np.asarray(clear) if not isinstance(clear, np.ndarray) else clear)
    if masks is not None:
        d0, d1 = (np.broadcast_to(as_ring(m), clear.shape).copy() for m in masks)
    else:
        if seed is None:
            seed = int.from_bytes(os.urandom(8), "little")
        d0 = random_words(clear.shape, seed, 0x70726F76, 0)
        d1 = random_words(clear.shape, seed, 0x70726F76, 1)
    pub = clear + d0 + d1
    return ShareTensor(pub, d0, 0), ShareTensor(pub.copy(), d1, 1)


def reconstruct(s0: ShareTensor, s1: ShareTensor) -> np.ndarray:
    if {s0.party, s1.party} != {0, 1}:
        raise ProtocolError("need one share from each party")
    if s0.shape != s1.shape:
        raise ProtocolError(f"share dims differ: {s0.shape} vs {s1.shape}")
    if not np.array_equal(s0.delta_pub, s1.delta_pub):
        raise ProtocolError("parties disagree on the public Δ")
    return s0.delta_pub - s0.delta_priv - s1.delta_priv


def reshare(ctx, parts: np.ndarray, op_id: int | None = None) -> ShareTensor:
    """Turn additive parts of ``y`` into fresh ABY2.0 shares of ``y`` (one round)."""
    parts = as_ring(parts)
    if op_id is None:
        op_id = ctx.next_op()
    mask = ctx.fresh_mask(op_id, parts.shape)
    mine = parts + mask
    peer, _ = unpack_tensor(ctx.exchange(Msg.RESHARE, op_id, pack_tensor(mine)))
    if peer.shape != mine.shape:
        ctx.channel.abort(f"reshare {op_id}: dims {mine.shape} vs {peer.shape}")
        raise ProtocolError(f"reshare op {op_id}: local dims {mine.shape} != peer dims {peer.shape}")
    return ShareTensor(mine + peer, mask, ctx.index)


# -- share files ----------------------------------------------------------
SHARE_MAGIC = "ABY2"
SHARE_VERSION = "v1"


def write_share_file(path, share: ShareTensor, f: int = DEFAULT_CONFIG.f, comment: str | None = None) -> None:
    """Header ``ABY2 v1 <party> <ndims> <d1> ... <f>``, then one ``Δ δ`` record per line."""
    dims = share.shape
    with open(path, "w") as fh:
        fh.write(f"{SHARE_MAGIC} {SHARE_VERSION} {share.party} {len(dims)} "
                 + "".join(f"{d} " for d in dims) + f"{f}\n")
        if comment:
            fh.write(f"# {comment}\n")
        pub = share.delta_pub.ravel()
        priv = share.delta_priv.ravel()
        step = 1 << 16
        for lo in range(0, pub.size, step):
            fh.write("".join(f"{a} {b}\n" for a, b in zip(pub[lo:lo + step].tolist(),
                                                          priv[lo:lo + step].tolist())))


def _parse_share_header(line: str, path) -> tuple[int, tuple, int]:
    tok = line.split()
    if len(tok) < 5 or tok[0] != SHARE_MAGIC or tok[1] != SHARE_VERSION:
        raise ParseError("not an ABY2 v1 share file header", path, 1)
    try:
        party, nd = int(tok[2]), int(tok[3])
        dims = tuple(int(t) for t in tok[4:4 + nd])
        f = int(tok[4 + nd])
    except (ValueError, IndexError) as exc:
        raise ParseError(f"bad header: {exc}", path, 1) from exc
    if len(tok) != 5 + nd or party not in (0, 1):
        raise ParseError("bad header field count or party", path, 1)
    return party, dims, f


def read_share_header(path) -> tuple[int, tuple, int, list[str]]:
    """``(party, dims, f, comments)`` without loading the body."""
    comments = []
    with open(path) as fh:
        party, dims, f = _parse_share_header(fh.readline(), path)
        for line in fh:
            if not line.startswith("#"):
                break
            comments.append(line[1:].strip())
    return party, dims, f, comments


def _first_bad_line(path) -> int | None:
    """Line number of the first record that is not two words in [0, 2^64)."""
    with open(path) as fh:
        fh.readline()
        for lineno, line in enumerate(fh, start=2):
            if line.startswith("#"):
                continue
            try:
                if not all(0 <= int(t) < 2**64 for t in line.split()):
                    return lineno
            except ValueError:
                return lineno
    return None


def read_share_file(path, select=None) -> tuple[ShareTensor, int]:
    """Load a share file; ``select(index) -> bool`` keeps only chosen flat records.

    With ``select`` given the returned tensor is flat.
    """
    with open(path) as fh:
        party, dims, f = _parse_share_header(fh.readline(), path)
        n = int(np.prod(dims)) if dims else 1
        lineno = 1
        tokens = []
        kept = 0
        idx = 0
        for line in fh:
            lineno += 1
            if line.startswith("#"):
                continue
            if select is not None and not select(idx):
                idx += 1
                continue
            tok = line.split()
            if len(tok) != 2:
                raise ParseError(f"expected 2 fields, got {len(tok)}", path, lineno)
            tokens.extend(tok)
            kept += 1
            idx += 1
        total = idx
    if total != n:
        raise ParseError(f"header promises {n} records, body has {total}", path, lineno)
    try:
        words = np.array(tokens, dtype=U64).reshape(kept, 2) if kept else np.zeros((0, 2), U64)
    except (ValueError, OverflowError) as exc:
        raise ParseError(f"bad ring element: {exc}", path, _first_bad_line(path)) from exc
    shape = dims if select is None else (kept,)
    return ShareTensor(words[:, 0].reshape(shape).copy(), words[:, 1].reshape(shape).copy(), party), f
