"""Tensorized secure operations on ABY2.0 shares.

Every function takes the calling party's :class:`~aby2cnn.party.Party` as
``ctx`` and that party's shares; both parties call the same functions in
the same order.  Linear operations are local.  Multiplicative gates follow
the setup/online structure: the setup part collects the party's share of
``δ_a ⋆ δ_b`` from the backend, the online part folds in the public Δ
terms, truncates locally and re-masks.
"""

from __future__ import annotations

import numpy as np

from aby2cnn.comparison import secure_relu
from aby2cnn.conv import ConvParams, conv2d_ring, conv_output_dims, im2col, mult_count_conv  # noqa: F401
from aby2cnn.correlated import GateKind
from aby2cnn.errors import ShapeError
from aby2cnn.ring import U64, as_ring, encode, truncate_part
from aby2cnn.sharing import ShareTensor, concat, reshare


def _same_shape(a: ShareTensor, b: ShareTensor, what: str):
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shapes {a.shape} and {b.shape} differ")


# -- linear, communication-free -------------------------------------------
def secure_add(a: ShareTensor, b: ShareTensor) -> ShareTensor:
    _same_shape(a, b, "secure_add")
    return ShareTensor(a.delta_pub + b.delta_pub, a.delta_priv + b.delta_priv, a.party)


def secure_negate(a: ShareTensor) -> ShareTensor:
    return ShareTensor(np.negative(a.delta_pub), np.negative(a.delta_priv), a.party)


def secure_sub(a: ShareTensor, b: ShareTensor) -> ShareTensor:
    return secure_add(a, secure_negate(b))


def secure_add_const(a: ShareTensor, c) -> ShareTensor:
    """``a + c`` for a clear ring constant: only Δ moves."""
    return ShareTensor(a.delta_pub + as_ring(c), a.delta_priv.copy(), a.party)


def secure_scale_int(a: ShareTensor, k: int) -> ShareTensor:
    """Exact multiply by a clear integer; no rescaling."""
    k = U64(int(k) & ((1 << 64) - 1))
    return ShareTensor(a.delta_pub * k, a.delta_priv * k, a.party)


def broadcast_to(a: ShareTensor, shape) -> ShareTensor:
    return ShareTensor(np.broadcast_to(a.delta_pub, shape).copy(),
                       np.broadcast_to(a.delta_priv, shape).copy(), a.party)


# -- clear-by-shared ------------------------------------------------------
def secure_const_matmul(ctx, c, b: ShareTensor) -> ShareTensor:
    """``c @ b`` with ``c`` a clear fixed-point matrix; one truncation, one reshare."""
    c = as_ring(c)
    if c.shape[-1] != b.shape[0]:
        raise ShapeError(f"secure_const_matmul: {c.shape} @ {b.shape}")
    part = c @ b.additive_part()
    return reshare(ctx, truncate_part(part, ctx.index, ctx.cfg))


def secure_const_hadamard(ctx, c, b: ShareTensor) -> ShareTensor:
    """``c ⊙ b`` with ``c`` clear, rescaled by ``2^-f``."""
    c = as_ring(c)
    if c.shape != b.shape:
        raise ShapeError(f"secure_const_hadamard: {c.shape} vs {b.shape}")
    part = c * b.additive_part()
    return reshare(ctx, truncate_part(part, ctx.index, ctx.cfg))


# -- shared-by-shared -----------------------------------------------------
def _mult_gate(ctx, kind: GateKind, a: ShareTensor, b: ShareTensor, params=None, *,
               truncate: bool = True) -> ShareTensor:
    """Setup + online phase of a two-operand multiplicative gate.

    With ``⋆`` the gate's bilinear map and ``i`` the party index::

        [Δ_y]_i = [δ_a ⋆ δ_b]_i - Δ_a ⋆ [δ_b]_i - [δ_a]_i ⋆ Δ_b + i·(Δ_a ⋆ Δ_b)

    The parts sum to ``(Δ_a - δ_a) ⋆ (Δ_b - δ_b) = a ⋆ b``.
    """
    op = ctx.next_op()
    setup = ctx.backend.cross_terms(op, kind, a.delta_priv, b.delta_priv, params)
    prod = _product(kind, params)
    part = setup - prod(a.delta_pub, b.delta_priv) - prod(a.delta_priv, b.delta_pub)
    if ctx.index == 1:
        part = part + prod(a.delta_pub, b.delta_pub)
    if truncate:
        part = truncate_part(part, ctx.index, ctx.cfg)
    return reshare(ctx, part)


def _product(kind: GateKind, params):
    if kind == GateKind.HADAMARD:
        return lambda x, y: x * y
    if kind == GateKind.MATMUL:
        return np.matmul
    return lambda k, x: conv2d_ring(k, x, params)


def secure_hadamard(ctx, a: ShareTensor, b: ShareTensor, truncate: bool = True) -> ShareTensor:
    _same_shape(a, b, "secure_hadamard")
    return _mult_gate(ctx, GateKind.HADAMARD, a, b, truncate=truncate)


def secure_matmul(ctx, w: ShareTensor, x: ShareTensor) -> ShareTensor:
    """``w @ x``; leading batch dimensions broadcast as in :func:`numpy.matmul`."""
    if len(w.shape) < 2 or len(x.shape) < 2 or w.shape[-1] != x.shape[-2]:
        raise ShapeError(f"secure_matmul: {w.shape} @ {x.shape}")
    return _mult_gate(ctx, GateKind.MATMUL, w, x)


def secure_conv2d(ctx, kernels: ShareTensor, x: ShareTensor, bias: ShareTensor | None,
                  p: ConvParams) -> ShareTensor:
    """Zero-padded strided convolution; bias (one per kernel) added after truncation."""
    if kernels.shape != p.kernel_shape:
        raise ShapeError(f"kernel shares {kernels.shape} != {p.kernel_shape}")
    o_ch, o_row, o_col = conv_output_dims(x.shape, p)
    y = _mult_gate(ctx, GateKind.CONV, kernels, x, p)
    if bias is None:
        return y
    if bias.size != o_ch:
        raise ShapeError(f"bias has {bias.size} entries for {o_ch} kernels")
    return secure_add(y, broadcast_to(bias.reshape(o_ch, 1, 1), (o_ch, o_row, o_col)))


# -- comparisons ----------------------------------------------------------
def secure_maxreduce(ctx, x: ShareTensor) -> ShareTensor:
    """Shares of the largest element of a flat tensor, as a length-1 tensor.

    Pairwise tournament with ``max(a, b) = b + relu(a - b)``; each level is
    one vectorized ReLU over all pairs.
    """
    if x.size == 0:
        raise ShapeError("secure_maxreduce of an empty tensor")
    cur = x.reshape(-1)
    while cur.size > 1:
        half = cur.size // 2
        a, b = cur[:half], cur[half:2 * half]
        m = secure_add(b, secure_relu(ctx, secure_sub(a, b)))
        cur = concat([m, cur[2 * half:]]) if cur.size % 2 else m
    return cur


def secure_indicator(ctx, x: ShareTensor, cfg=None) -> ShareTensor:
    """``encode(1)`` where ``x >= 0`` and ``0`` where ``x < 0``.

    Computed as ``relu(1 - K * relu(-x))`` with ``K`` applied as an exact
    integer multiply.  Exact while ``K * |x|`` stays below ``2^63`` ulp.
    """
    cfg = cfg or ctx.cfg
    r = secure_relu(ctx, secure_negate(x))
    inner = secure_add_const(secure_negate(secure_scale_int(r, cfg.K)), cfg.one)
    return secure_relu(ctx, inner)


def secure_argmax(ctx, x: ShareTensor) -> ShareTensor:
    """Shares of the highest index holding the maximum, as a raw integer (not scaled)."""
    n = x.size
    if n == 0:
        raise ShapeError("secure_argmax of an empty tensor")
    flat = x.reshape(-1)
    z1 = secure_maxreduce(ctx, flat)
    ones = encode(np.ones((n, 1)), ctx.cfg)
    z2 = secure_const_matmul(ctx, ones, z1.reshape(1, 1)).reshape(-1)
    z3 = secure_sub(flat, z2)
    z4 = secure_indicator(ctx, z3)
    # raw integer indices times encode(1) rescale exactly to the raw index
    z5 = secure_const_hadamard(ctx, np.arange(n, dtype=U64), z4)
    return secure_maxreduce(ctx, z5)


def scalar_argmax(ctx, x: ShareTensor) -> ShareTensor:
    """Same steps as :func:`secure_argmax`, one element per secure call.

    A timing baseline: every comparison, indicator and product runs on a
    length-1 tensor, so round trips grow linearly with the input length.
    """
    n = x.size
    if n == 0:
        raise ShapeError("scalar_argmax of an empty tensor")
    flat = x.reshape(-1)
    best = flat[0:1]
    for i in range(1, n):
        best = secure_add(best, secure_relu(ctx, secure_sub(flat[i:i + 1], best)))
    one = encode(np.ones((1, 1)), ctx.cfg)
    idx = None
    for i in range(n):
        b = secure_const_matmul(ctx, one, best.reshape(1, 1)).reshape(-1)
        ind = secure_indicator(ctx, secure_sub(flat[i:i + 1], b))
        v = secure_const_hadamard(ctx, np.array([i], dtype=U64), ind)
        idx = v if idx is None else secure_add(idx, secure_relu(ctx, secure_sub(v, idx)))
    return idx
