"""Acceptance criteria: one PASS/FAIL line per criterion on the terminal.

Run with ``pytest tests/test_acceptance.py -v``; the lines are printed
even without ``-s``.
"""

import itertools
import time

import numpy as np
import pytest

from aby2cnn import encode
from aby2cnn.cli import main
from aby2cnn.conv import ConvParams, conv2d_ring, conv_output_dims
from aby2cnn.local import run_local
from aby2cnn.memprobe import MEMORY_LAYER, probe_in_subprocess
from aby2cnn.ops import (scalar_argmax, secure_argmax, secure_conv2d, secure_hadamard, secure_indicator,
                         secure_matmul, secure_maxreduce)
from aby2cnn.comparison import secure_relu
from aby2cnn.pipeline import (oracle_inference, random_architecture, random_weights, reference_model,
                              run_local_inference)
from aby2cnn.report import time_argmax
from aby2cnn.ring import DEFAULT_CONFIG, U64, signed, truncate_clear
from aby2cnn.sharing import make_shares, reconstruct, write_share_file
from aby2cnn.splitter import chunk_output_rows, horizontal_split_indices, run_conv_chunked

from _util import brute_conv, fx, random_words

ONE = int(DEFAULT_CONFIG.one)


@pytest.fixture
def report(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\nCRITERION {n}: {'PASS' if ok else 'FAIL'}: {detail}")
        return ok
    return emit


# -- 1. oracle equivalence -------------------------------------------------
def test_criterion_1_oracle_equivalence(report):
    t0 = time.perf_counter()
    runs = bad = 0
    spec = reference_model()
    for j in range(50):
        rng = np.random.default_rng(1000 + j)
        weights = random_weights(spec, rng)
        image = rng.uniform(0, 1, spec.input_dims)
        want = oracle_inference(spec, weights, image)
        for backend in ("dealer", "helper"):
            runs += 1
            bad += run_local_inference(spec, weights, image, backend=backend, seed=j).label != want
    for j in range(200):
        rng = np.random.default_rng(5000 + j)
        arch = random_architecture(rng)
        weights = random_weights(arch, rng)
        image = rng.uniform(-1, 1, arch.input_dims)
        want = oracle_inference(arch, weights, image)
        for backend in ("dealer", "helper"):
            runs += 1
            bad += run_local_inference(arch, weights, image, backend=backend, seed=j).label != want
    dt = time.perf_counter() - t0
    ok = bad == 0 and dt < 600
    assert report(1, ok, f"{runs - bad}/{runs} labels equal the oracle (50 reference + 200 random "
                         f"architectures, both backends) in {dt:.0f} s")


# -- 2. dims and counts ----------------------------------------------------
def test_criterion_2_plan_tables(report, capsys):
    assert main(["plan"]) == 0
    lines = capsys.readouterr().out.splitlines()[1:5]
    want = ["cnn1,conv,5x13x13,21125", "cnn2,conv,3x6x6,8640", "nn1,dense,100,10800", "nn2,dense,10,1000"]
    assert report(2, lines == want, "plan prints " + " | ".join(lines))


# -- 3. indicator exactness ------------------------------------------------
def _indicator(x_ring, seed):
    s0, s1 = make_shares(x_ring, seed=seed)
    run = run_local(lambda ctx, s: secure_indicator(ctx, s), s0, s1, seed=seed)
    return reconstruct(*run.results)


def test_criterion_3_indicator_exactness(report):
    xs = np.arange(-2**20, 2**20 + 1, dtype=np.int64)
    got = _indicator(xs.astype(U64), 1)
    sweep_bad = int(np.count_nonzero(got != np.where(xs >= 0, ONE, 0).astype(U64)))
    r = random_words(np.random.default_rng(3), 10**5)
    got_r = _indicator(r, 2)
    wrong = got_r != np.where(signed(r) >= 0, ONE, 0).astype(U64)
    rand_bad = int(np.count_nonzero(wrong))
    # the construction is exact while K * |x| stays inside the signed ring
    limit = 2**63 // DEFAULT_CONFIG.K
    in_range = np.abs(signed(r).astype(object)) < limit
    in_range_bad = int(np.count_nonzero(wrong & in_range.astype(bool)))
    ok = sweep_bad == 0 and rand_bad == 0
    assert report(3, ok, f"sweep of 2^21+1 values: {sweep_bad} exceptions; 10^5 random ring elements: "
                         f"{rand_bad} exceptions, {in_range_bad} of them with |x| < 2^49 ulp")


# -- 4. argmax -------------------------------------------------------------
LENGTHS = (1, 2, 10, 100, 200, 300, 400, 500)


def test_criterion_4_argmax(report):
    rng = np.random.default_rng(4)
    cases = []
    for n in LENGTHS:
        for t in range(100):
            if t % 2:
                v = rng.integers(-6, 6, n).astype(float)  # many ties
                v[rng.integers(0, n, 2)] = v.max()
            else:
                v = rng.uniform(-50, 50, n)
            cases.append(v)
    shares = [make_shares(fx(v), seed=j) for j, v in enumerate(cases)]

    def program(ctx, ins):
        return [secure_argmax(ctx, s) for s in ins]

    run = run_local(program, [s[0] for s in shares], [s[1] for s in shares], seed=4)
    got = [int(reconstruct(a, b)[0]) for a, b in zip(*run.results)]
    want = [int(len(v) - 1 - np.argmax(fx(v).view(np.int64)[::-1])) for v in cases]
    correct = sum(g == w for g, w in zip(got, want))
    t_vec, gv, w = time_argmax(secure_argmax, 500, seed=1)
    t_sca, gs, _ = time_argmax(scalar_argmax, 500, seed=1)
    ok = correct == len(cases) and t_vec < t_sca and gv == w and gs == w
    assert report(4, ok, f"{correct}/{len(cases)} trials correct over lengths {LENGTHS}; "
                         f"n=500 tensorized {t_vec:.2f} s vs per-element loop {t_sca:.2f} s")


# -- 5. horizontal split ---------------------------------------------------
def _covered(ranges, k, s):
    rows = []
    for r in ranges:
        first = (r.start - 1) // s
        rows += range(first, first + (r.n_rows - k) // s + 1)
    return rows


def _chunked_conv_error(tmp_path, p, in_dims, nh, seed):
    rng = np.random.default_rng(seed)
    k, x = fx(rng.uniform(-1, 1, p.kernel_shape)), fx(rng.uniform(-1, 1, in_dims))
    ks, xs = make_shares(k, seed=seed), make_shares(x, seed=seed + 1)
    for i in (0, 1):
        write_share_file(tmp_path / f"x{seed}.p{i}.shr", xs[i], 13)

    def program(ctx, kshare):
        from aby2cnn.sharing import read_share_file
        out = run_conv_chunked(ctx, tmp_path / f"x{seed}.p{ctx.index}.shr", kshare, None, p, 1, nh,
                               tmp_path / f"s{seed}.{ctx.index}", "layer")
        return read_share_file(out)[0]

    got = reconstruct(*run_local(program, ks[0], ks[1], seed=seed).results)
    want = truncate_clear(brute_conv(k, x, p))
    return int(np.abs(signed(got - want)).max())


def test_criterion_5_horizontal_split(report, tmp_path):
    configs = cases = bad = 0
    for i_r, k, s, pt, pb in itertools.product(range(1, 65), range(1, 9), range(1, 5), range(3), range(3)):
        D = i_r + pt + pb
        if k > D:
            continue
        configs += 1
        o_r = (D - k) // s + 1
        for n_h in range(1, o_r + 1):
            cases += 1
            ranges = horizontal_split_indices(i_r, k, s, pt, pb, n_h)
            if sum(chunk_output_rows(ranges, k, s)) != o_r or _covered(ranges, k, s) != list(range(o_r)):
                bad += 1
    rng = np.random.default_rng(5)
    worst = 0
    for j in range(40):
        kr, kc = int(rng.integers(1, 6)), int(rng.integers(1, 4))
        s = (int(rng.integers(1, 4)), int(rng.integers(1, 3)))
        pad = tuple(int(v) for v in rng.integers(0, 3, 4))
        p = ConvParams(int(rng.integers(1, 4)), kr, kc, int(rng.integers(1, 3)), s, pad)
        dims = (p.i_ch, int(rng.integers(kr + 2, 24)), int(rng.integers(kc, 9)))
        o_r = conv_output_dims(dims, p)[1]
        worst = max(worst, _chunked_conv_error(tmp_path, p, dims, int(rng.integers(1, o_r + 1)), 100 + j))
    example = [(r.start, r.end) for r in horizontal_split_indices(28, 5, 2, 1, 0, 2)]
    ok = bad == 0 and worst <= 2 and example == [(1, 15), (13, 29)]
    assert report(5, ok, f"{cases - bad}/{cases} (config, n_h) cases over {configs} configs cover every "
                         f"output row once; 40 secure chunked convs max error {worst} ulp; "
                         f"worked example {example}")


# -- 6. multiplicative gates -----------------------------------------------
def _batched(make, op, oracle, n, seed, batch=1000):
    """Max signed error over ``n`` random instances of a two-input gate."""
    rng = np.random.default_rng(seed)
    worst = 0
    for b in range(n // batch):
        inst = [make(rng) for _ in range(batch)]
        pairs = [(make_shares(x, seed=seed + 7 * i), make_shares(y, seed=seed + 7 * i + 1)) for i, (x, y, _) in
                 enumerate(inst)]

        def program(ctx, ins):
            return [op(ctx, x, y, extra) for (x, y), (_, _, extra) in zip(ins, inst)]

        ins0 = [(px[0], py[0]) for px, py in pairs]
        ins1 = [(px[1], py[1]) for px, py in pairs]
        run = run_local(program, ins0, ins1, backend="helper" if b % 2 else "dealer", seed=seed + b)
        for (x, y, extra), r0, r1 in zip(inst, *run.results):
            worst = max(worst, int(np.abs(signed(reconstruct(r0, r1) - oracle(x, y, extra))).max()))
    return worst


def _rand_fx(rng, shape, scale=4.0):
    return fx(rng.uniform(-scale, scale, shape))


def _hadamard_case(rng):
    shape = tuple(int(v) for v in rng.integers(1, 5, int(rng.integers(1, 3))))
    return _rand_fx(rng, shape), _rand_fx(rng, shape), None


def _matmul_case(rng):
    m, k, n = (int(v) for v in rng.integers(1, 6, 3))
    return _rand_fx(rng, (m, k)), _rand_fx(rng, (k, n)), None


def _conv_case(rng):
    kr, kc = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    p = ConvParams(int(rng.integers(1, 3)), kr, kc, int(rng.integers(1, 3)),
                   (int(rng.integers(1, 3)), int(rng.integers(1, 3))), tuple(int(v) for v in rng.integers(0, 2, 4)))
    dims = (p.i_ch, int(rng.integers(kr, 7)), int(rng.integers(kc, 7)))
    return _rand_fx(rng, p.kernel_shape, 1.0), _rand_fx(rng, dims, 2.0), p


def test_criterion_6_gate_accuracy(report):
    n = 10**4
    e_had = _batched(_hadamard_case, lambda ctx, x, y, _: secure_hadamard(ctx, x, y),
                     lambda x, y, _: truncate_clear(x * y), n, 60)
    e_mat = _batched(_matmul_case, lambda ctx, x, y, _: secure_matmul(ctx, x, y),
                     lambda x, y, _: truncate_clear(x @ y), n, 61)
    e_conv = _batched(_conv_case, lambda ctx, k, x, p: secure_conv2d(ctx, k, x, None, p),
                      lambda k, x, p: truncate_clear(conv2d_ring(k, x, p)), n, 62)
    rng = np.random.default_rng(63)
    r = random_words(rng, 10**5)
    s0, s1 = make_shares(r, seed=63)
    relu = reconstruct(*run_local(lambda ctx, s: secure_relu(ctx, s), s0, s1, seed=63).results)
    relu_bad = int(np.count_nonzero(relu != np.where(signed(r) >= 0, r, 0).astype(U64)))
    vecs = [rng.integers(-2**60, 2**60, int(rng.integers(1, 65))) for _ in range(2000)]
    sh = [make_shares(v.astype(U64), seed=64 + j) for j, v in enumerate(vecs)]
    run = run_local(lambda ctx, ins: [secure_maxreduce(ctx, s) for s in ins], [s[0] for s in sh],
                    [s[1] for s in sh], seed=64)
    max_bad = sum(int(signed(reconstruct(a, b))[0]) != int(v.max()) for v, a, b in zip(vecs, *run.results))
    ok = max(e_had, e_mat, e_conv) <= 2 and relu_bad == 0 and max_bad == 0
    assert report(6, ok, f"max error over 10^4 instances each: hadamard {e_had} ulp, matmul {e_mat} ulp, "
                         f"conv {e_conv} ulp; relu {relu_bad} mismatches in 10^5; maxreduce {max_bad} "
                         f"mismatches in 2000")


# -- 7. backends and helper view -------------------------------------------
def test_criterion_7_backends_and_helper_view(report):
    rng = np.random.default_rng(7)
    p = ConvParams(3, 3, 3, 2, (1, 2), (1, 0, 1, 1))
    a, b = _rand_fx(rng, (4, 5)), _rand_fx(rng, (5, 3))
    k, x = _rand_fx(rng, p.kernel_shape, 1.0), _rand_fx(rng, (2, 9, 8))
    v = _rand_fx(rng, (40,))
    ins = [make_shares(t, seed=70 + j) for j, t in enumerate((a, b, k, x, v))]

    def program(ctx, s):
        sa, sb, sk, sx, sv = s
        return [secure_matmul(ctx, sa, sb), secure_hadamard(ctx, sa, sa), secure_conv2d(ctx, sk, sx, None, p),
                secure_relu(ctx, sv), secure_maxreduce(ctx, sv), secure_argmax(ctx, sv)]

    outs = {}
    for backend in ("dealer", "helper"):
        run = run_local(program, [i[0] for i in ins], [i[1] for i in ins], backend=backend, seed=7)
        outs[backend] = [reconstruct(r0, r1) for r0, r1 in zip(*run.results)]
    ops_equal = all(np.array_equal(d, h) for d, h in zip(outs["dealer"], outs["helper"]))
    spec = reference_model()
    weights = random_weights(spec, rng)
    img_a, img_b = rng.uniform(0, 1, spec.input_dims), rng.uniform(0, 1, spec.input_dims)
    labels = {run_local_inference(spec, weights, img_a, backend=bk, seed=8).label for bk in ("dealer", "helper")}
    ra = run_local_inference(spec, weights, img_a, backend="helper", seed=9, image_seed=77, record=True)
    rb = run_local_inference(spec, weights, img_b, backend="helper", seed=9, image_seed=77, record=True)

    def received(res):
        return [[raw for d, raw in link if d == "recv"] for link in res.run.helper_transcript]

    n_frames = sum(map(len, received(ra)))
    same_view = received(ra) == received(rb)
    ok = ops_equal and len(labels) == 1 and same_view and n_frames > 0
    assert report(7, ok, f"dealer and helper outputs identical for 6 ops: {ops_equal}; inference labels "
                         f"{sorted(labels)}; helper's {n_frames} received frames byte-identical across "
                         f"two images: {same_view}")


# -- 8. memory scaling -----------------------------------------------------
def test_criterion_8_memory_trend(report):
    unsplit = probe_in_subprocess(*MEMORY_LAYER, 1)
    split = probe_in_subprocess(*MEMORY_LAYER, 4)
    ratio = unsplit["peak_mb"] / split["peak_mb"]
    ws = (unsplit["peak_mb"] - unsplit["baseline_mb"]) / max(split["peak_mb"] - split["baseline_mb"], 1e-9)
    rows, cols, kk, n_ker = MEMORY_LAYER
    ok = ratio >= 2
    assert report(8, ok, f"{rows}x{cols} input, {n_ker} kernels {kk}x{kk}: peak RSS {unsplit['peak_mb']:.0f} MB "
                         f"unsplit vs {split['peak_mb']:.0f} MB with n_h=4 ({ratio:.2f}x; working set "
                         f"{ws:.2f}x); the 42 MB / 15.2 s reference figures are not reproducible here "
                         f"(measured on other hardware and software)")
