"""Benchmarks and figures: metrics summaries, indicator sweep, argmax timing, split sweeps.

Every bench writes a CSV table and a PNG next to it and returns both paths.
"""

from __future__ import annotations

import csv
import time
from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from aby2cnn.local import run_local  # noqa: E402
from aby2cnn.memprobe import MEMORY_LAYER, probe_in_subprocess  # noqa: E402
from aby2cnn.metrics import read_metrics_csv  # noqa: E402
from aby2cnn.ops import scalar_argmax, secure_argmax, secure_indicator  # noqa: E402
from aby2cnn.pipeline import random_weights, reference_model, run_local_inference  # noqa: E402
from aby2cnn.ring import DEFAULT_CONFIG, U64, decode, encode  # noqa: E402
from aby2cnn.sharing import make_shares, reconstruct  # noqa: E402
from aby2cnn.splitter import SplitPlan  # noqa: E402

ARGMAX_LENGTHS = (1, 2, 10, 100, 200, 300, 400, 500)


def _write_csv(path: Path, header, rows) -> Path:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    return path


def _save(fig, path: Path) -> Path:
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


# -- metrics CSV ----------------------------------------------------------
def metrics_report(csv_path, out) -> list[Path]:
    """Per-layer wall time and peak memory from a metrics CSV."""
    out = Path(out)
    rows = [r for r in read_metrics_csv(csv_path) if r["layer"] != "TOTAL"]
    wall = defaultdict(float)
    peak = defaultdict(float)
    sent = defaultdict(int)
    for r in rows:
        wall[r["layer"]] += float(r["wall_s"])
        peak[r["layer"]] = max(peak[r["layer"]], float(r["peak_rss_mb"]))
        sent[r["layer"]] += int(r["bytes_sent"])
    layers = list(wall)
    table = _write_csv(out / "metrics_by_layer.csv", ("layer", "wall_s", "peak_rss_mb", "bytes_sent"),
                       [(k, f"{wall[k]:.4f}", f"{peak[k]:.1f}", sent[k]) for k in layers])
    fig, (a, b) = plt.subplots(1, 2, figsize=(9, 3.5))
    a.bar(layers, [wall[k] for k in layers])
    a.set_ylabel("wall time (s)")
    b.bar(layers, [peak[k] for k in layers], color="tab:orange")
    b.set_ylabel("peak resident memory (MB)")
    for ax in (a, b):
        ax.tick_params(axis="x", rotation=45)
    return [table, _save(fig, out / "metrics_by_layer.png")]


# -- indicator ------------------------------------------------------------
def indicator_sweep(xs_ulp: np.ndarray, seed: int = 0, backend: str = "dealer", cfg=DEFAULT_CONFIG):
    """Reconstructed secure indicator for raw ring inputs ``xs_ulp``."""
    x = np.asarray(xs_ulp).astype(np.int64).astype(U64)
    s0, s1 = make_shares(x, seed=seed)
    run = run_local(lambda ctx, s: secure_indicator(ctx, s, cfg), s0, s1, backend=backend, seed=seed, cfg=cfg)
    return reconstruct(*run.results)


def bench_indicator(out, seed: int = 0) -> list[Path]:
    out = Path(out)
    xs = np.concatenate([np.arange(-64, 65), np.linspace(-2**20, 2**20, 801).astype(np.int64)])
    xs = np.unique(xs)
    got = indicator_sweep(xs, seed)
    one = DEFAULT_CONFIG.one
    want = np.where(xs >= 0, one, 0).astype(U64)
    table = _write_csv(out / "indicator.csv", ("x_ulp", "indicator", "expected"),
                       zip(xs.tolist(), decode(got).tolist(), decode(want).tolist()))
    fig, (a, b) = plt.subplots(1, 2, figsize=(9, 3.5))
    near = np.abs(xs) <= 64
    for ax, m, title in ((a, near, "|x| <= 64 ulp"), (b, ~near | near, "|x| <= 2^20 ulp")):
        ax.step(xs[m], decode(got)[m], where="post", label="secure")
        ax.plot(xs[m], decode(want)[m], "k:", label="exact")
        ax.set_title(title)
        ax.set_xlabel("x (ulp)")
    a.set_ylabel("indicator")
    a.legend()
    return [table, _save(fig, out / "indicator.png")]


# -- argmax ---------------------------------------------------------------
def time_argmax(fn, n: int, seed: int = 0, backend: str = "dealer") -> tuple[float, int, int]:
    """Wall time of one two-party run of ``fn``, its answer and the clear answer."""
    rng = np.random.default_rng(seed + n)
    v = rng.integers(-8, 8, n).astype(float) / 4
    s0, s1 = make_shares(encode(v), seed=seed)
    t0 = time.perf_counter()
    run = run_local(lambda ctx, s: fn(ctx, s), s0, s1, backend=backend, seed=seed)
    dt = time.perf_counter() - t0
    want = int(n - 1 - np.argmax(v[::-1]))
    return dt, int(reconstruct(*run.results)[0]), want


def bench_argmax(out, seed: int = 0, lengths=ARGMAX_LENGTHS) -> list[Path]:
    out = Path(out)
    rows = []
    for n in lengths:
        t_vec, got_v, want = time_argmax(secure_argmax, n, seed)
        t_sca, got_s, _ = time_argmax(scalar_argmax, n, seed)
        rows.append((n, f"{t_vec:.4f}", f"{t_sca:.4f}", got_v == want and got_s == want))
    table = _write_csv(out / "argmax_timing.csv", ("n", "tensor_s", "scalar_s", "correct"), rows)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ns = [r[0] for r in rows]
    ax.plot(ns, [float(r[1]) for r in rows], "o-", label="tensorized")
    ax.plot(ns, [float(r[2]) for r in rows], "s--", label="per-element loop")
    ax.set_xlabel("vector length")
    ax.set_ylabel("wall time (s)")
    ax.legend()
    return [table, _save(fig, out / "argmax_timing.png")]


# -- split sweep ----------------------------------------------------------
SPLIT_PLANS = {
    "unsplit": SplitPlan(),
    "cnn 5,3": SplitPlan(cnn_vertical=(5, 3)),
    "hsplit 2": SplitPlan(cnn_horizontal=(2, 2)),
    "hsplit 4": SplitPlan(cnn_horizontal=(4, 4)),
    "nn 20,2": SplitPlan(nn_splits=(20, 2)),
    "cnn 5,3 nn 20,2": SplitPlan(cnn_vertical=(5, 3), nn_splits=(20, 2)),
}


def split_sweep(seed: int = 0, plans=None, chunk_mode: str = "process"):
    """Reference model with random weights under several plans; one row per plan."""
    plans = plans or SPLIT_PLANS
    spec = reference_model()
    rng = np.random.default_rng(seed)
    weights = random_weights(spec, rng)
    image = rng.uniform(0, 1, spec.input_dims)
    rows = []
    for name, plan in plans.items():
        plan = SplitPlan(plan.cnn_vertical, plan.cnn_horizontal, plan.nn_splits, chunk_mode)
        t0 = time.perf_counter()
        res = run_local_inference(spec, weights, image, plan, backend="helper", seed=seed, collect_metrics=True)
        wall = time.perf_counter() - t0
        recs = res.metrics[0].records
        peak_chunk = max((r.peak_rss_mb for r in recs if r.unit != "whole"), default=0.0)
        sent = sum(r.bytes_sent for r in recs)
        rows.append((name, res.label, f"{wall:.3f}", f"{peak_chunk:.1f}", len(recs), sent))
    return rows


def bench_splits(out, seed: int = 0) -> list[Path]:
    out = Path(out)
    rows = split_sweep(seed)
    table = _write_csv(out / "splits.csv",
                       ("plan", "label", "wall_s", "peak_unit_rss_mb", "units", "party0_bytes_sent"), rows)
    fig, (a, b) = plt.subplots(1, 2, figsize=(10, 3.5))
    names = [r[0] for r in rows]
    a.bar(names, [float(r[2]) for r in rows])
    a.set_ylabel("wall time (s)")
    b.bar(names, [float(r[3]) for r in rows], color="tab:orange")
    b.set_ylabel("peak unit memory (MB)")
    for ax in (a, b):
        ax.tick_params(axis="x", rotation=45)
    return [table, _save(fig, out / "splits.png")]


def bench_memory(out, seed: int = 0, splits=(1, 2, 4, 8)) -> list[Path]:
    out = Path(out)
    rows = []
    for n_h in splits:
        r = probe_in_subprocess(*MEMORY_LAYER, n_h, seed)
        rows.append((n_h, f"{r['baseline_mb']:.1f}", f"{r['peak_mb']:.1f}",
                     f"{r['peak_mb'] - r['baseline_mb']:.1f}", f"{r['wall_s']:.2f}"))
    table = _write_csv(out / "memory_hsplit.csv",
                       ("n_h", "baseline_mb", "peak_mb", "working_set_mb", "wall_s"), rows)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot([r[0] for r in rows], [float(r[2]) for r in rows], "o-", label="peak")
    ax.plot([r[0] for r in rows], [float(r[3]) for r in rows], "s--", label="peak - baseline")
    ax.set_xscale("log", base=2)
    ax.set_xlabel("horizontal splits n_h")
    ax.set_ylabel("resident memory (MB)")
    ax.legend()
    return [table, _save(fig, out / "memory_hsplit.png")]


BENCHES = {
    "indicator": bench_indicator,
    "argmax": bench_argmax,
    "splits": bench_splits,
    "memory": bench_memory,
}


