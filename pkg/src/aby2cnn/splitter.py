"""Bounded-memory execution of convolution and dense layers.

A convolution layer is cut vertically (kernel groups) and horizontally
(overlapping bands of padded input rows); a dense layer is cut into
contiguous blocks of weight rows.  Each piece runs as an isolated unit of
work that reads its inputs from share files and writes its output to a
chunk file; chunk files are then concatenated into the layer output file.
"""

from __future__ import annotations

import itertools
import logging
import os
import pickle
import shutil
from contextlib import nullcontext
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from aby2cnn.conv import ConvParams, conv_output_dims
from aby2cnn.errors import ConfigurationError, ParseError, ShapeError
from aby2cnn.metrics import peak_rss_mb
from aby2cnn.ops import secure_conv2d, secure_matmul
from aby2cnn.ring import U64
from aby2cnn.sharing import ShareTensor, read_share_file, read_share_header, write_share_file

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class RowRange:
    """1-based inclusive row band ``[start, end]`` of the padded input."""

    start: int
    end: int

    @property
    def n_rows(self) -> int:
        return self.end - self.start + 1


def horizontal_split_indices(i_r: int, k_row: int, s_row: int, p_top: int, p_bottom: int,
                             n_h: int) -> list[RowRange]:
    """Row-start/row-end indices of ``n_h`` horizontal splits of the padded input.

    Every split but the last yields ``floor(o_r / n_h)`` output rows; the
    last also takes the remainder.  Consecutive bands overlap by
    ``k_row - s_row`` rows.
    """
    D_r = i_r + p_top + p_bottom
    if k_row > D_r:
        raise ConfigurationError(f"kernel rows {k_row} exceed padded input rows {D_r}")
    o_r = (D_r - k_row) // s_row + 1
    if n_h < 1:
        raise ConfigurationError(f"number of horizontal splits must be >= 1, got {n_h}")
    if n_h > o_r:
        raise ConfigurationError(f"{n_h} horizontal splits for only {o_r} output rows")
    h_r = o_r // n_h
    S_r = [0] * (n_h + 1)
    E_r = [0] * (n_h + 1)
    t = 0
    for i in range(1, n_h + 1):
        if i == n_h:
            h_r = o_r // n_h + o_r % n_h
        if i == 1:
            S_r[i] = 1
        else:
            S_r[i] = t - (k_row - 1) + s_row
        E_r[i] = S_r[i] + (k_row - 1) + (h_r - 1) * s_row
        t = E_r[i]
    return [RowRange(S_r[i], E_r[i]) for i in range(1, n_h + 1)]


def chunk_output_rows(ranges, k_row: int, s_row: int) -> list[int]:
    return [(r.n_rows - k_row) // s_row + 1 for r in ranges]


def contiguous_blocks(n: int, n_splits: int) -> list[tuple[int, int]]:
    """``n_splits`` half-open blocks of ``floor(n/n_splits)`` items, remainder in the last."""
    if n_splits < 1 or n_splits > n:
        raise ConfigurationError(f"cannot cut {n} items into {n_splits} blocks")
    h = n // n_splits
    bounds = [i * h for i in range(n_splits)] + [n]
    return list(zip(bounds[:-1], bounds[1:]))


@dataclass
class SplitPlan:
    """``cnn_vertical[j]``: kernel groups for conv layer j (1 = whole layer,
    ``n_ker`` = kernel by kernel).  ``cnn_horizontal[j]``: row bands.
    ``nn_splits[j]``: weight-row blocks for dense layer j.  Missing entries
    default to 1.  ``chunk_mode`` is ``"inline"`` or ``"process"``.
    """

    cnn_vertical: tuple = ()
    cnn_horizontal: tuple = ()
    nn_splits: tuple = ()
    chunk_mode: str = "inline"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.chunk_mode not in ("inline", "process"):
            raise ConfigurationError(f"chunk_mode must be inline or process, got {self.chunk_mode!r}")
        for v in (*self.cnn_vertical, *self.cnn_horizontal, *self.nn_splits):
            if int(v) < 1:
                raise ConfigurationError(f"split counts must be >= 1, got {v}")

    def conv(self, j: int) -> tuple[int, int]:
        v = self.cnn_vertical[j] if j < len(self.cnn_vertical) else 1
        h = self.cnn_horizontal[j] if j < len(self.cnn_horizontal) else 1
        return int(v), int(h)

    def dense(self, j: int) -> int:
        return int(self.nn_splits[j]) if j < len(self.nn_splits) else 1


# -- chunk I/O ------------------------------------------------------------
def read_rows(path, row_lo: int, row_hi: int) -> tuple[ShareTensor, int]:
    """Rows ``[row_lo, row_hi)`` of every channel of a ``(C, H, W)`` share file.

    Streams the file, so only the requested band is held in memory.
    """
    party, dims, f, comments = read_share_header(path)
    if len(dims) != 3:
        raise ShapeError(f"{path}: expected a (C, H, W) share file, got dims {dims}")
    C, H, W = dims
    row_lo, row_hi = max(0, row_lo), min(H, row_hi)
    n_rows = max(0, row_hi - row_lo)
    tokens = []
    with open(path) as fh:
        body = (line for line in itertools.islice(fh, 1 + len(comments), None))
        pos = 0
        count = n_rows * W
        for c in range(C if count else 0):
            start = (c * H + row_lo) * W
            next(itertools.islice(body, start - pos, start - pos), None)  # skip ahead
            for line in itertools.islice(body, count):
                tokens.extend(line.split())
            pos = start + count
    try:
        words = np.array(tokens, dtype=U64).reshape(C, n_rows, W, 2)
    except ValueError as exc:
        raise ParseError(f"truncated or malformed share body: {exc}", path) from exc
    return ShareTensor(words[..., 0].copy(), words[..., 1].copy(), party), f


def _pad_rows(x: ShareTensor, top: int, bottom: int) -> ShareTensor:
    if top == 0 and bottom == 0:
        return x
    pad = ((0, 0), (top, bottom), (0, 0))
    return ShareTensor(np.pad(x.delta_pub, pad), np.pad(x.delta_priv, pad), x.party)


def concat_channel_files(chunk_files, out_path, out_dims, party: int, f: int, comment=None):
    """Stitch chunk files into one ``(C, R, W)`` share file.

    ``chunk_files`` is a list (kernel groups, in order) of lists (row bands,
    in order) of paths.  Records are copied line by line.
    """
    C, R, W = out_dims
    with open(out_path, "w") as out:
        out.write(f"ABY2 v1 {party} 3 {C} {R} {W} {f}\n")
        if comment:
            out.write(f"# {comment}\n")
        written_channels = 0
        for group in chunk_files:
            headers = [read_share_header(p) for p in group]
            g = headers[0][1][0]
            if any(h[1][0] != g or h[1][2] != W for h in headers):
                raise ShapeError("chunk dims disagree within a kernel group")
            if sum(h[1][1] for h in headers) != R:
                raise ShapeError(f"row bands cover {sum(h[1][1] for h in headers)} rows, layer has {R}")
            handles = [open(p) for p in group]
            try:
                for fh, h in zip(handles, headers):
                    for _ in range(1 + len(h[3])):
                        fh.readline()
                for _ in range(g):
                    for fh, h in zip(handles, headers):
                        out.writelines(itertools.islice(fh, h[1][1] * W))
            finally:
                for fh in handles:
                    fh.close()
            written_channels += g
        if written_channels != C:
            raise ShapeError(f"chunks supply {written_channels} channels, layer has {C}")


# -- units of work --------------------------------------------------------
def _unit(metrics, ctx, layer, unit):
    return nullcontext() if metrics is None else metrics.unit(ctx, layer, unit)


def run_unit(ctx, fn, *args):
    """Run ``fn(ctx, *args)`` inline or in a forked child, per ``ctx.chunk_mode``.

    In process mode the child inherits the party's sockets, runs the unit
    and reports back its op counter and traffic counts; the parent blocks
    meanwhile so the sockets are never read concurrently.
    """
    mode = getattr(ctx, "chunk_mode", "inline")
    if mode == "inline":
        return fn(ctx, *args)
    if ctx.channel.has_pending():
        raise ConfigurationError("cannot fork a unit while peer frames are parked")
    backend_channel = getattr(ctx.backend, "channel", None)
    if backend_channel is None and not hasattr(ctx.backend, "address"):
        raise ConfigurationError("process chunk mode needs a networked (helper) backend")
    r, w = os.pipe()
    pid = os.fork()
    if pid == 0:  # child
        status = 1
        try:
            os.close(r)
            result = fn(ctx, *args)
            st = ctx.channel.stats
            msg = pickle.dumps((ctx.op_counter, st.frames_sent, st.bytes_sent, st.frames_recv,
                                st.bytes_recv, result, peak_rss_mb(), None))
            status = 0
        except BaseException as exc:  # noqa: BLE001
            msg = pickle.dumps((None,) * 7 + (repr(exc),))
        with os.fdopen(w, "wb") as fh:
            fh.write(msg)
        os._exit(status)
    os.close(w)
    with os.fdopen(r, "rb") as fh:
        data = fh.read()
    os.waitpid(pid, 0)
    op, fs, bs, fr, br, result, child_rss, err = pickle.loads(data)
    if err is not None:
        raise RuntimeError(f"chunk process failed: {err}")
    ctx.op_counter = op
    # picked up by RunMetrics.unit; the parent's own high-water mark misses the child
    ctx.child_peak_rss_mb = max(getattr(ctx, "child_peak_rss_mb", 0.0), child_rss)
    st = ctx.channel.stats
    st.frames_sent, st.bytes_sent, st.frames_recv, st.bytes_recv = fs, bs, fr, br
    return result


def _conv_chunk(ctx, input_path, kernels, bias, params: ConvParams, rows: RowRange, out_path, comment):
    top, bottom, left, right = params.padding
    x, f = read_rows(input_path, rows.start - 1 - top, rows.end - top)
    _, H, _ = read_share_header(input_path)[1]
    pad_top = max(0, top - (rows.start - 1))
    pad_bottom = max(0, rows.end - top - H)
    band = _pad_rows(x, pad_top, pad_bottom)
    sub = params.with_(n_ker=kernels.shape[0], padding=(0, 0, left, right))
    y = secure_conv2d(ctx, kernels, band, bias, sub)
    write_share_file(out_path, y, f, comment)
    return y.shape


def run_conv_chunked(ctx, input_path, kernels, bias, params: ConvParams, n_vertical: int = 1,
                     n_h: int = 1, scratch_dir=".", layer: str = "conv", metrics=None,
                     out_path=None) -> Path:
    """Convolve the shares in ``input_path`` piece by piece; return the output share file.

    ``kernels`` / ``bias`` may be share tensors or share-file paths.
    """
    scratch = Path(scratch_dir)
    scratch.mkdir(parents=True, exist_ok=True)
    if not isinstance(kernels, ShareTensor):
        kernels = read_share_file(kernels)[0]
    if bias is not None and not isinstance(bias, ShareTensor):
        bias = read_share_file(bias)[0]
    party, in_dims, f, _ = read_share_header(input_path)
    o_ch, o_row, o_col = conv_output_dims(in_dims, params)
    top, bottom = params.padding[:2]
    bands = horizontal_split_indices(in_dims[1], params.k_row, params.strides[0], top, bottom, n_h)
    groups = contiguous_blocks(params.n_ker, n_vertical)
    chunk_files = []
    for g, (k_lo, k_hi) in enumerate(groups):
        band_files = []
        for b, rows in enumerate(bands):
            path = scratch / f"{layer}.k{k_lo}-{k_hi - 1}.r{rows.start}-{rows.end}.p{party}.shr"
            comment = f"chunk {layer} {k_lo}-{k_hi - 1} {rows.start}-{rows.end}"
            kb = kernels[k_lo:k_hi]
            bb = None if bias is None else bias.reshape(-1)[k_lo:k_hi]
            with _unit(metrics, ctx, layer, f"k{k_lo}-{k_hi - 1}/r{rows.start}-{rows.end}"):
                run_unit(ctx, _conv_chunk, input_path, kb, bb, params, rows, path, comment)
            band_files.append(path)
        chunk_files.append(band_files)
    out = Path(out_path) if out_path else scratch / f"{layer}.out.p{party}.shr"
    concat_channel_files(chunk_files, out, (o_ch, o_row, o_col), party, f,
                         comment=f"layer {layer} vertical={n_vertical} horizontal={n_h}")
    return out


def _matmul_block(ctx, w_block, x, out_path, comment, f):
    y = secure_matmul(ctx, w_block, x)
    write_share_file(out_path, y, f, comment)
    return y.shape


def run_matmul_chunked(ctx, w, x, n_splits: int = 1, scratch_dir=".", layer: str = "dense",
                       metrics=None, out_path=None) -> Path:
    """``w @ x`` in ``n_splits`` contiguous weight-row blocks; returns the output share file."""
    scratch = Path(scratch_dir)
    scratch.mkdir(parents=True, exist_ok=True)
    f = ctx.cfg.f
    if not isinstance(w, ShareTensor):
        w, f = read_share_file(w)
    if not isinstance(x, ShareTensor):
        x, f = read_share_file(x)
    if x.delta_pub.ndim == 1:
        x = x.reshape(-1, 1)
    rows = w.shape[0]
    blocks = contiguous_blocks(rows, n_splits)
    files = []
    for lo, hi in blocks:
        path = scratch / f"{layer}.rows{lo}-{hi - 1}.p{ctx.index}.shr"
        comment = f"chunk {layer} rows {lo}-{hi - 1}"
        with _unit(metrics, ctx, layer, f"rows{lo}-{hi - 1}"):
            run_unit(ctx, _matmul_block, w[lo:hi], x, path, comment, f)
        files.append(path)
    out = Path(out_path) if out_path else scratch / f"{layer}.out.p{ctx.index}.shr"
    cols = x.shape[1]
    with open(out, "w") as fh:
        fh.write(f"ABY2 v1 {ctx.index} 2 {rows} {cols} {f}\n# layer {layer} splits={n_splits}\n")
        for p in files:
            _, dims, _, comments = read_share_header(p)
            with open(p) as src:
                for _ in range(1 + len(comments)):
                    src.readline()
                shutil.copyfileobj(src, fh)
    return out
