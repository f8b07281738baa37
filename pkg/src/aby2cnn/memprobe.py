"""Peak resident memory of one shared conv layer, measured in a fresh process.

``python -m aby2cnn.memprobe ROWS COLS K N_KER N_H WORKDIR SEED`` prints the
baseline RSS before the layer, the process high-water mark and wall time.
Kept free of plotting imports so the baseline stays small.
"""

from __future__ import annotations

import subprocess
import sys
import tempfile
import time
from pathlib import Path

import numpy as np

from aby2cnn.conv import ConvParams
from aby2cnn.local import run_local
from aby2cnn.metrics import current_rss_mb, peak_rss_mb
from aby2cnn.ring import DEFAULT_CONFIG, encode
from aby2cnn.sharing import make_shares, write_share_file
from aby2cnn.splitter import run_conv_chunked

MEMORY_LAYER = (640, 640, 5, 8)  # rows, cols, kernel size, kernels


def memory_probe(rows: int, cols: int, k: int, n_ker: int, n_h: int, workdir, seed: int = 0) -> dict:
    """Peak RSS of one shared conv layer, input streamed from share files.

    Meant to run in a fresh process (see :func:`probe_in_subprocess`) so
    the high-water mark belongs to this layer alone.
    """
    work = Path(workdir)
    work.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    p = ConvParams(n_ker, k, k, 1, (1, 1), (1, 1, 1, 1))
    inputs = []
    for i, sh in enumerate(make_shares(encode(rng.uniform(-1, 1, (1, rows, cols))), seed=seed)):
        path = work / f"x.p{i}.shr"
        write_share_file(path, sh, DEFAULT_CONFIG.f)
        inputs.append(path)
    kernels = make_shares(encode(rng.uniform(-1, 1, p.kernel_shape)), seed=seed + 1)
    del sh
    base = current_rss_mb()

    def program(ctx, args):
        x_path, ker = args
        return run_conv_chunked(ctx, x_path, ker, None, p, 1, n_h, work / f"party{ctx.index}", "probe")

    t0 = time.perf_counter()
    run_local(program, (inputs[0], kernels[0]), (inputs[1], kernels[1]), backend="dealer", seed=seed)
    return {"n_h": n_h, "baseline_mb": base, "peak_mb": peak_rss_mb(), "wall_s": time.perf_counter() - t0}


def probe_in_subprocess(rows: int, cols: int, k: int, n_ker: int, n_h: int, seed: int = 0) -> dict:
    with tempfile.TemporaryDirectory(prefix="aby2cnn-probe-") as tmp:
        cmd = [sys.executable, "-m", "aby2cnn.memprobe", str(rows), str(cols), str(k), str(n_ker),
               str(n_h), tmp, str(seed)]
        out = subprocess.run(cmd, check=True, capture_output=True, text=True).stdout.split()
    return {"n_h": n_h, "baseline_mb": float(out[0]), "peak_mb": float(out[1]), "wall_s": float(out[2])}


if __name__ == "__main__":
    if len(sys.argv) != 8:
        sys.exit("usage: python -m aby2cnn.memprobe ROWS COLS K N_KER N_H WORKDIR SEED")
    r_, c_, k_, n_, h_ = (int(v) for v in sys.argv[1:6])
    res = memory_probe(r_, c_, k_, n_, h_, sys.argv[6], int(sys.argv[7]))
    print(res["baseline_mb"], res["peak_mb"], res["wall_s"])
