import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from aby2cnn import ShapeError, encode
from aby2cnn.conv import ConvParams, conv_output_dims, mult_count_conv
from aby2cnn.local import run_local
from aby2cnn.ops import (scalar_argmax, secure_add, secure_argmax, secure_const_hadamard, secure_const_matmul,
                         secure_conv2d, secure_hadamard, secure_indicator, secure_matmul, secure_maxreduce,
                         secure_negate, secure_sub)
from aby2cnn.ring import U64, signed, truncate_clear
from aby2cnn.sharing import make_shares, reconstruct

from _util import brute_conv, fx, ring, secure

ONE = int(encode(1.0))
CNN1 = ConvParams(5, 5, 5, 1, (2, 2), (1, 0, 1, 0))
CNN2 = ConvParams(3, 4, 4, 5, (2, 2), (1, 0, 1, 0))


def ulp_diff(got, want):
    return np.abs(signed(got - want))


# -- dimensions and counts -------------------------------------------------
def test_conv_output_dims_examples():
    assert conv_output_dims((1, 28, 28), CNN1) == (5, 13, 13)
    assert conv_output_dims((5, 13, 13), CNN2) == (3, 6, 6)
    assert conv_output_dims((1, 5, 5), ConvParams(1, 5, 5, 1)) == (1, 1, 1)


def test_conv_output_dims_kernel_too_large():
    with pytest.raises(ShapeError):
        conv_output_dims((1, 4, 4), ConvParams(1, 5, 5, 1))


def test_conv_params_validation():
    with pytest.raises(ShapeError):
        ConvParams(1, 3, 3, 1, (0, 1))
    with pytest.raises(ShapeError):
        ConvParams(1, 3, 3, 1, (1, 1), (0, -1, 0, 0))


def test_mult_counts():
    assert mult_count_conv((1, 28, 28), CNN1) == 21_125
    assert mult_count_conv((5, 13, 13), CNN2) == 8_640
    assert mult_count_conv((1, 1, 1), ConvParams(1, 1, 1, 1)) == 1


# -- linear ops --------------------------------------------------------------
def _local(fn, *clear, seed=0):
    """Linear ops need no context; apply to both parties' shares directly."""
    pairs = [make_shares(c, seed=seed + j) for j, c in enumerate(clear)]
    return reconstruct(fn(*(p[0] for p in pairs)), fn(*(p[1] for p in pairs)))


def test_add_examples():
    assert _local(secure_add, fx([1.0]), fx([2.0])).tolist() == [int(encode(3.0))]
    a = fx([1.5, -2.0])
    assert _local(lambda s: secure_add(s, secure_negate(s)), a).tolist() == [0, 0]


def test_negate_examples():
    assert _local(secure_negate, fx([1.0])).tolist() == [int(encode(-1.0))]
    assert _local(secure_negate, fx([0.0])).tolist() == [0]


@given(st.integers(0, 2**32))
def test_linear_ops_bit_exact(seed):
    rng = np.random.default_rng(seed)
    a, b = (rng.integers(0, 2**64, (3, 4), dtype=np.uint64) for _ in range(2))
    assert np.array_equal(_local(secure_add, a, b), a + b)
    assert np.array_equal(_local(secure_sub, a, b), a - b)
    assert np.array_equal(_local(secure_negate, a), np.negative(a))


def test_add_shape_mismatch():
    a0, _ = make_shares(ring([1, 2]), seed=0)
    b0, _ = make_shares(ring([1, 2, 3]), seed=0)
    with pytest.raises(ShapeError):
        secure_add(a0, b0)


def test_linear_ops_send_nothing():
    run = run_local(lambda ctx, s: secure_add(s, secure_negate(s)), *make_shares(fx([1.0]), seed=1), record=True)
    assert run.party_transcripts == ([], [])


# -- clear-by-shared ---------------------------------------------------------
def test_const_matmul_identity():
    x = fx(np.linspace(-4, 4, 6)).reshape(6, 1)
    got = secure(lambda ctx, s: secure_const_matmul(ctx, encode(np.eye(6)), s), x)
    assert ulp_diff(got, x).max() <= 1


def test_const_matmul_broadcasts_scalar():
    got = secure(lambda ctx, s: secure_const_matmul(ctx, encode(np.ones((4, 1))), s), fx([[1.0]]))
    assert got.ravel().tolist() == [ONE] * 4


@given(st.integers(0, 2**32))
def test_const_matmul_random(seed):
    rng = np.random.default_rng(seed)
    c, b = fx(rng.uniform(-2, 2, (3, 5))), fx(rng.uniform(-2, 2, (5, 2)))
    got = secure(lambda ctx, s: secure_const_matmul(ctx, c, s), b, seed=seed)
    assert ulp_diff(got, truncate_clear(c @ b)).max() <= 1


def test_const_hadamard_examples():
    ind = ring([0, ONE, 0, ONE])
    k = np.arange(4, dtype=U64)
    assert secure(lambda ctx, s: secure_const_hadamard(ctx, k, s), ind).tolist() == [0, 1, 0, 3]
    zero = np.zeros(3, dtype=U64)
    assert secure(lambda ctx, s: secure_const_hadamard(ctx, zero, s), fx([1.0, -2.0, 3.5])).tolist() == [0, 0, 0]


@given(st.integers(0, 2**32))
def test_const_hadamard_random(seed):
    rng = np.random.default_rng(seed)
    c, b = fx(rng.uniform(-3, 3, 7)), fx(rng.uniform(-3, 3, 7))
    got = secure(lambda ctx, s: secure_const_hadamard(ctx, c, s), b, seed=seed)
    assert ulp_diff(got, truncate_clear(c * b)).max() <= 1


# -- shared-by-shared --------------------------------------------------------
def test_hadamard_zero_masks_exact():
    a = make_shares(fx([1.0, 2.0]), masks=(ring([0, 0]), ring([0, 0])))
    b = make_shares(fx([5.0, 7.0]), masks=(ring([0, 0]), ring([0, 0])))
    run = run_local(lambda ctx, ab: secure_hadamard(ctx, *ab), (a[0], b[0]), (a[1], b[1]))
    assert reconstruct(*run.results).tolist() == [int(encode(5.0)), int(encode(14.0))]


def test_hadamard_by_zero():
    got = secure(secure_hadamard, fx([1.5, -2.25, 3.0]), fx([0.0, 0.0, 0.0]))
    assert ulp_diff(got, np.zeros(3, dtype=U64)).max() <= 1


@given(st.integers(0, 2**32), st.sampled_from(["dealer", "helper"]))
def test_hadamard_random_one_ulp(seed, backend):
    rng = np.random.default_rng(seed)
    a, b = fx(rng.uniform(-100, 100, (4, 5))), fx(rng.uniform(-100, 100, (4, 5)))
    got = secure(secure_hadamard, a, b, seed=seed, backend=backend)
    assert ulp_diff(got, truncate_clear(a * b)).max() <= 1


def test_hadamard_shape_mismatch():
    with pytest.raises(ShapeError):
        secure(secure_hadamard, fx([1.0, 2.0]), fx([1.0]))


def test_matmul_identity():
    x = fx(np.linspace(-1, 1, 5)).reshape(5, 1)
    got = secure(secure_matmul, encode(np.eye(5)), x)
    assert ulp_diff(got, x).max() <= 1


def test_matmul_dense_layer_dims():
    rng = np.random.default_rng(0)
    got = secure(secure_matmul, fx(rng.uniform(-0.1, 0.1, (100, 108))), fx(rng.uniform(0, 1, (108, 1))))
    assert got.shape == (100, 1)


@given(st.integers(0, 2**32), st.integers(1, 6), st.integers(1, 6), st.integers(1, 4))
def test_matmul_random_two_ulp(seed, m, k, n):
    rng = np.random.default_rng(seed)
    w, x = fx(rng.uniform(-4, 4, (m, k))), fx(rng.uniform(-4, 4, (k, n)))
    got = secure(secure_matmul, w, x, seed=seed)
    assert ulp_diff(got, truncate_clear(w @ x)).max() <= 2


def test_matmul_inner_dim_mismatch():
    with pytest.raises(ShapeError):
        secure(secure_matmul, fx(np.ones((2, 3))), fx(np.ones((2, 1))))


def _conv(p, with_bias=True):
    def program(ctx, k, x, b):
        return secure_conv2d(ctx, k, x, b if with_bias else None, p)
    return program


def test_conv_identity_kernel():
    p = ConvParams(1, 1, 1, 1)
    x = fx(np.linspace(-2, 2, 16).reshape(1, 4, 4))
    got = secure(_conv(p, False), fx(np.ones((1, 1, 1, 1))), x, fx([0.0]))
    assert ulp_diff(got, x).max() <= 1


def test_conv_reference_first_layer_shape():
    rng = np.random.default_rng(1)
    got = secure(_conv(CNN1), fx(rng.uniform(-0.2, 0.2, CNN1.kernel_shape)), fx(rng.uniform(0, 1, (1, 28, 28))),
                 fx(rng.uniform(-0.1, 0.1, 5)))
    assert got.shape == (5, 13, 13)


@given(st.integers(0, 2**32), st.integers(1, 3), st.integers(1, 3), st.integers(1, 2), st.integers(1, 2),
       st.tuples(*[st.integers(0, 2)] * 4))
def test_conv_random_two_ulp(seed, kr, kc, sr, sc, pad):
    rng = np.random.default_rng(seed)
    p = ConvParams(3, kr, kc, 2, (sr, sc), pad)
    k, x, b = fx(rng.uniform(-1, 1, p.kernel_shape)), fx(rng.uniform(-1, 1, (2, 6, 6))), fx(rng.uniform(-1, 1, 3))
    got = secure(_conv(p), k, x, b, seed=seed)
    want = truncate_clear(brute_conv(k, x, p)) + b[:, None, None]
    assert ulp_diff(got, want).max() <= 2


def test_conv_shape_errors():
    p = ConvParams(1, 3, 3, 2)
    with pytest.raises(ShapeError):
        secure(_conv(p), fx(np.ones(p.kernel_shape)), fx(np.ones((1, 5, 5))), fx([0.0]))


# -- comparisons -------------------------------------------------------------
def test_maxreduce_examples():
    assert secure(secure_maxreduce, fx([1.0, 5.0, 3.0])).tolist() == [int(encode(5.0))]
    assert secure(secure_maxreduce, fx([2.5] * 7)).tolist() == [int(encode(2.5))]


@given(st.lists(st.integers(-(2**60), 2**60), min_size=1, max_size=64), st.integers(0, 2**20))
def test_maxreduce_exact(values, seed):
    assert signed(secure(secure_maxreduce, ring(values), seed=seed)).tolist() == [max(values)]


def test_maxreduce_empty():
    with pytest.raises(ShapeError):
        secure(secure_maxreduce, np.zeros(0, dtype=U64))


def test_indicator_examples():
    assert secure(secure_indicator, fx([-1.0])).tolist() == [0]
    assert secure(secure_indicator, fx([0.0])).tolist() == [ONE]
    assert secure(secure_indicator, ring([-1])).tolist() == [0]
    assert secure(secure_indicator, ring([1])).tolist() == [ONE]


@given(st.lists(st.integers(-(2**45), 2**45), min_size=1, max_size=50), st.integers(0, 2**20))
def test_indicator_only_zero_or_one(values, seed):
    got = secure(secure_indicator, ring(values), seed=seed)
    assert got.tolist() == [ONE if v >= 0 else 0 for v in values]


def test_argmax_examples():
    assert secure(secure_argmax, fx([3, 1, 4, 1, 5, 9, 2, 6])).tolist() == [5]
    assert secure(secure_argmax, fx([7, 7])).tolist() == [1]
    assert secure(secure_argmax, fx([-4.0])).tolist() == [0]


def _highest_argmax(v):
    v = np.asarray(v)
    return int(len(v) - 1 - np.argmax(v[::-1]))


@given(st.lists(st.integers(-20, 20), min_size=1, max_size=80), st.integers(0, 2**20))
def test_argmax_highest_tie(values, seed):
    x = fx(np.array(values) / 4)
    assert secure(secure_argmax, x, seed=seed).tolist() == [_highest_argmax(values)]


def test_argmax_long_vector():
    rng = np.random.default_rng(3)
    v = rng.integers(-50, 50, 500)
    assert secure(secure_argmax, fx(v / 8)).tolist() == [_highest_argmax(v)]


@given(st.lists(st.integers(-20, 20), min_size=2, max_size=30), st.integers(-100, 100), st.integers(1, 5))
def test_argmax_shift_and_scale_invariant(values, shift, scale):
    v = np.array(values, dtype=float)
    base = secure(secure_argmax, fx(v)).tolist()
    assert secure(secure_argmax, fx(v + shift)).tolist() == base
    assert secure(secure_argmax, fx(v * scale)).tolist() == base


def test_argmax_empty():
    with pytest.raises(ShapeError):
        secure(secure_argmax, np.zeros(0, dtype=U64))


def test_scalar_baseline_agrees():
    v = np.array([2, 9, -1, 9, 4])
    assert secure(scalar_argmax, fx(v)).tolist() == [3]


def test_backends_identical_outputs():
    rng = np.random.default_rng(4)
    a, b = fx(rng.uniform(-2, 2, (3, 3))), fx(rng.uniform(-2, 2, (3, 3)))
    for fn in (secure_hadamard, secure_matmul):
        d = secure(fn, a, b, seed=7, backend="dealer")
        h = secure(fn, a, b, seed=7, backend="helper")
        assert np.array_equal(d, h)
