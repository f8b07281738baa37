"""End-to-end secure CNN inference, its clear fixed-point oracle, and model I/O."""

from __future__ import annotations

import logging
import tempfile
from contextlib import nullcontext
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from aby2cnn.comparison import secure_relu
from aby2cnn.conv import ConvParams, conv2d_ring, conv_output_dims, mult_count_conv
from aby2cnn.errors import ConfigurationError, ParseError, ShapeError
from aby2cnn.local import run_local
from aby2cnn.metrics import RunMetrics
from aby2cnn.ops import secure_add, secure_argmax, secure_conv2d, secure_matmul
from aby2cnn.ring import DEFAULT_CONFIG, FixedPointConfig, U64, decode, encode, signed, truncate_clear
from aby2cnn.sharing import ShareTensor, make_shares, read_share_file, reconstruct, write_share_file
from aby2cnn.splitter import SplitPlan, run_conv_chunked, run_matmul_chunked, run_unit

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str  # "conv" | "dense"
    conv: ConvParams | None = None
    rows: int = 0  # dense: outputs
    cols: int = 0  # dense: inputs
    activation: str = "relu"
    weights_path: str | None = None
    bias_path: str | None = None

    @property
    def weight_shape(self) -> tuple:
        return self.conv.kernel_shape if self.kind == "conv" else (self.rows, self.cols)

    @property
    def bias_shape(self) -> tuple:
        return (self.conv.n_ker,) if self.kind == "conv" else (self.rows,)


@dataclass
class ModelSpec:
    input_dims: tuple
    layers: list
    cfg: FixedPointConfig = DEFAULT_CONFIG

    def layer_dims(self) -> list[tuple]:
        """Output dims of every layer; raises :class:`ShapeError` on a mismatch."""
        dims = tuple(self.input_dims)
        out = []
        for layer in self.layers:
            if layer.kind == "conv":
                if len(dims) != 3:
                    raise ShapeError(f"{layer.name}: conv needs (C, H, W) input, got {dims}")
                dims = conv_output_dims(dims, layer.conv)
            elif layer.kind == "dense":
                n = int(np.prod(dims))
                if n != layer.cols:
                    raise ShapeError(f"{layer.name}: expects {layer.cols} inputs, previous layer gives {n}")
                dims = (layer.rows,)
            else:
                raise ShapeError(f"{layer.name}: unknown layer kind {layer.kind!r}")
            out.append(dims)
        return out

    def mult_counts(self) -> list[int]:
        counts = []
        dims = tuple(self.input_dims)
        for layer, o in zip(self.layers, self.layer_dims()):
            counts.append(mult_count_conv(dims, layer.conv) if layer.kind == "conv" else layer.rows * layer.cols)
            dims = o
        return counts


def reference_model(cfg: FixedPointConfig = DEFAULT_CONFIG) -> ModelSpec:
    """The 4-layer MNIST architecture: two conv layers, two dense layers.

    CNN2 uses strides (2, 2); (1, 1) would give 3x11x11 = 363 features,
    incompatible with the 108-input first dense layer.
    """
    return ModelSpec((1, 28, 28), [
        LayerSpec("cnn1", "conv", ConvParams(5, 5, 5, 1, (2, 2), (1, 0, 1, 0))),
        LayerSpec("cnn2", "conv", ConvParams(3, 4, 4, 5, (2, 2), (1, 0, 1, 0))),
        LayerSpec("nn1", "dense", rows=100, cols=108),
        LayerSpec("nn2", "dense", rows=10, cols=100),
    ], cfg)


def random_weights(spec: ModelSpec, rng: np.random.Generator, bias_scale: float = 0.1) -> dict:
    """Uniform weights scaled by fan-in so activations stay O(1)."""
    weights = {}
    for layer in spec.layers:
        shape = layer.weight_shape
        fan_in = int(np.prod(shape[1:]))
        w = rng.uniform(-1, 1, shape) * np.sqrt(3.0 / fan_in)
        b = rng.uniform(-bias_scale, bias_scale, layer.bias_shape)
        weights[layer.name] = (w, b)
    return weights


def random_architecture(rng: np.random.Generator, cfg: FixedPointConfig = DEFAULT_CONFIG) -> ModelSpec:
    """A small random conv/dense stack for property testing."""
    c, h, w = int(rng.integers(1, 3)), int(rng.integers(5, 11)), int(rng.integers(5, 11))
    dims = (c, h, w)
    layers = []
    for j in range(int(rng.integers(0, 3))):
        kr, kc = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        pad = tuple(int(v) for v in rng.integers(0, 2, 4))
        strides = (int(rng.integers(1, 3)), int(rng.integers(1, 3)))
        p = ConvParams(int(rng.integers(1, 4)), kr, kc, dims[0], strides, pad)
        try:
            nd = conv_output_dims(dims, p)
        except ShapeError:
            break
        layers.append(LayerSpec(f"conv{j + 1}", "conv", p))
        dims = nd
    n = int(np.prod(dims))
    for j in range(int(rng.integers(1, 3))):
        rows = int(rng.integers(2, 12))
        layers.append(LayerSpec(f"dense{j + 1}", "dense", rows=rows, cols=n,
                                activation="relu" if rng.random() < 0.7 else "none"))
        n = rows
    return ModelSpec((c, h, w), layers, cfg)


# -- tensor text files ----------------------------------------------------
def write_tensor(path, x: np.ndarray) -> None:
    x = np.asarray(x, dtype=np.float64)
    with open(path, "w") as fh:
        fh.write(f"TNS v1 {x.ndim} " + " ".join(str(d) for d in x.shape) + "\n")
        fh.write("".join(f"{v!r}\n" for v in x.ravel().tolist()))


def read_tensor(path, expect_shape=None) -> np.ndarray:
    with open(path) as fh:
        head = fh.readline().split()
        if len(head) < 3 or head[0] != "TNS" or head[1] != "v1":
            raise ParseError("missing 'TNS v1 <ndims> <dims...>' header", path, 1)
        try:
            nd = int(head[2])
            dims = tuple(int(d) for d in head[3:])
        except ValueError as exc:
            raise ParseError(f"bad header: {exc}", path, 1) from exc
        if len(dims) != nd:
            raise ParseError(f"header declares {nd} dims but lists {len(dims)}", path, 1)
        n = int(np.prod(dims)) if dims else 1
        vals = []
        lineno = 1
        for lineno, line in enumerate(fh, start=2):
            s = line.strip()
            if not s or s.startswith("#"):
                continue
            if len(vals) == n:
                raise ParseError(f"more than the {n} elements declared in the header", path, lineno)
            try:
                vals.append(float(s))
            except ValueError as exc:
                raise ParseError(f"not a number: {s!r}", path, lineno) from exc
    if len(vals) != n:
        raise ParseError(f"header declares {n} elements, body has {len(vals)}", path, lineno)
    x = np.array(vals, dtype=np.float64).reshape(dims)
    if expect_shape is not None and tuple(x.shape) != tuple(expect_shape):
        raise ShapeError(f"{path}: dims {x.shape} != expected {tuple(expect_shape)}")
    return x


def ingest_image(path, spec: ModelSpec) -> np.ndarray:
    return read_tensor(path, spec.input_dims)


def ingest_model(spec: ModelSpec, base_dir=".") -> dict:
    """Load every layer's weight and bias tensor files and validate dims."""
    spec.layer_dims()
    base = Path(base_dir)
    weights = {}
    for layer in spec.layers:
        if not layer.weights_path or not layer.bias_path:
            raise ConfigurationError(f"layer {layer.name} has no weight/bias file")
        w = read_tensor(base / layer.weights_path, layer.weight_shape)
        b = read_tensor(base / layer.bias_path).reshape(-1)
        if b.shape != layer.bias_shape:
            raise ShapeError(f"{layer.name}: bias dims {b.shape} != {layer.bias_shape}")
        weights[layer.name] = (w, b)
    return weights


def save_model(spec: ModelSpec, weights: dict, directory) -> ModelSpec:
    """Write weight/bias tensor files; returns the spec with file names filled in."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    layers = []
    for layer in spec.layers:
        w, b = weights[layer.name]
        wp, bp = f"{layer.name}.w.tns", f"{layer.name}.b.tns"
        write_tensor(d / wp, w)
        write_tensor(d / bp, b)
        layers.append(replace(layer, weights_path=wp, bias_path=bp))
    return ModelSpec(spec.input_dims, layers, spec.cfg)


# -- clear references -----------------------------------------------------
def _relu_ring(x):
    return np.where(signed(x) >= 0, x, U64(0)).astype(U64)


def highest_argmax(v) -> int:
    v = np.asarray(v).ravel()
    return int(v.size - 1 - np.argmax(v[::-1]))


def oracle_forward(spec: ModelSpec, weights: dict, image: np.ndarray) -> np.ndarray:
    """Clear fixed-point forward pass, truncating once per multiplicative output."""
    cfg = spec.cfg
    h = encode(image, cfg)
    for layer in spec.layers:
        w, b = (encode(t, cfg) for t in weights[layer.name])
        if layer.kind == "conv":
            z = truncate_clear(conv2d_ring(w, h, layer.conv), cfg) + b[:, None, None]
        else:
            z = truncate_clear(w @ h.reshape(-1), cfg) + b
        h = _relu_ring(z) if layer.activation == "relu" else z
    return h


def oracle_inference(spec: ModelSpec, weights: dict, image: np.ndarray) -> int:
    return highest_argmax(signed(oracle_forward(spec, weights, image)))


def float_inference(spec: ModelSpec, weights: dict, image: np.ndarray) -> int:
    """Double-precision comparator (informational only)."""
    h = np.asarray(image, dtype=np.float64)
    for layer in spec.layers:
        w, b = weights[layer.name]
        if layer.kind == "conv":
            p = layer.conv
            top, bottom, left, right = p.padding
            xp = np.pad(h, ((0, 0), (top, bottom), (left, right)))
            _, o_row, o_col = conv_output_dims(h.shape, p)
            z = np.zeros((p.n_ker, o_row, o_col))
            for r in range(o_row):
                for c in range(o_col):
                    patch = xp[:, r * p.strides[0]:r * p.strides[0] + p.k_row,
                               c * p.strides[1]:c * p.strides[1] + p.k_col]
                    z[:, r, c] = np.tensordot(w, patch, axes=3)
            z += b[:, None, None]
        else:
            z = w @ h.reshape(-1) + b
        h = np.maximum(z, 0) if layer.activation == "relu" else z
    return highest_argmax(h)


# -- providers ------------------------------------------------------------
def share_model(spec: ModelSpec, weights: dict, seed: int | None = None):
    """Model provider: ABY2.0 shares of every weight and bias, per party."""
    out = ({}, {})
    for j, layer in enumerate(spec.layers):
        w, b = weights[layer.name]
        sw = make_shares(encode(w, spec.cfg), None if seed is None else seed * 1000 + 2 * j)
        sb = make_shares(encode(b, spec.cfg), None if seed is None else seed * 1000 + 2 * j + 1)
        for i in (0, 1):
            out[i][layer.name] = (sw[i], sb[i])
    return out


def share_image(image: np.ndarray, cfg: FixedPointConfig = DEFAULT_CONFIG, seed: int | None = None):
    return make_shares(encode(image, cfg), seed)


# -- secure inference -----------------------------------------------------
def _relu_unit(ctx, z_path, h_path, f):
    z, _ = read_share_file(z_path)
    write_share_file(h_path, secure_relu(ctx, z), f, "relu")


def run_inference(ctx, spec: ModelSpec, model_shares: dict, image_share: ShareTensor,
                  plan: SplitPlan | None = None, scratch_dir=None,
                  metrics: RunMetrics | None = None) -> ShareTensor:
    """One compute server's side of the whole inference; returns its label share.

    Without a plan every layer runs in memory.  With a plan each layer's
    output, and each ReLU, goes through share files in ``scratch_dir`` and
    layers are cut per the plan.
    """
    spec.layer_dims()
    if plan is not None:
        return _run_planned(ctx, spec, model_shares, image_share, plan, scratch_dir, metrics)
    h = image_share
    for layer in spec.layers:
        w, b = model_shares[layer.name]
        ctx.use_backend_for(layer.name)
        with _unit(metrics, ctx, layer.name, "whole"):
            if layer.kind == "conv":
                z = secure_conv2d(ctx, w, h, b, layer.conv)
            else:
                z = secure_add(secure_matmul(ctx, w, h.reshape(-1, 1)), b.reshape(-1, 1)).reshape(-1)
            h = secure_relu(ctx, z) if layer.activation == "relu" else z
    ctx.use_backend_for("argmax")
    with _unit(metrics, ctx, "argmax", "whole"):
        return secure_argmax(ctx, h)


def _unit(metrics, ctx, layer, unit):
    return nullcontext() if metrics is None else metrics.unit(ctx, layer, unit)


def _run_planned(ctx, spec, model_shares, image_share, plan, scratch_dir, metrics):
    if scratch_dir is None:
        raise ConfigurationError("a split plan needs a scratch directory")
    scratch = Path(scratch_dir)
    scratch.mkdir(parents=True, exist_ok=True)
    ctx.chunk_mode = plan.chunk_mode
    f = spec.cfg.f
    i = ctx.index
    h_path = scratch / f"input.p{i}.shr"
    write_share_file(h_path, image_share, f, "image")
    conv_j = dense_j = 0
    for layer in spec.layers:
        w, b = model_shares[layer.name]
        ctx.use_backend_for(layer.name)
        z_path = scratch / f"{layer.name}.z.p{i}.shr"
        if layer.kind == "conv":
            v, nh = plan.conv(conv_j)
            conv_j += 1
            run_conv_chunked(ctx, h_path, w, b, layer.conv, v, nh, scratch / layer.name,
                             layer.name, metrics, out_path=z_path)
        else:
            n = dense_j
            dense_j += 1
            h, _ = read_share_file(h_path)
            y_path = run_matmul_chunked(ctx, w, h.reshape(-1, 1), plan.dense(n), scratch / layer.name,
                                        layer.name, metrics)
            y, _ = read_share_file(y_path)
            write_share_file(z_path, secure_add(y, b.reshape(-1, 1)).reshape(-1), f, f"{layer.name} z")
        if layer.activation == "relu":
            nxt = scratch / f"{layer.name}.h.p{i}.shr"
            with _unit(metrics, ctx, layer.name, "relu"):
                run_unit(ctx, _relu_unit, z_path, nxt, f)
            h_path = nxt
        else:
            h_path = z_path
    h, _ = read_share_file(h_path)
    ctx.use_backend_for("argmax")
    with _unit(metrics, ctx, "argmax", "whole"):
        return secure_argmax(ctx, h)


@dataclass
class InferenceResult:
    label: int
    label_shares: tuple
    run: object
    metrics: tuple = field(default=(None, None))


def run_local_inference(spec: ModelSpec, weights: dict, image: np.ndarray, plan: SplitPlan | None = None,
                        backend="dealer", seed: int = 0, scratch_dir=None, record: bool = False,
                        collect_metrics: bool = False, image_seed: int | None = None,
                        lookahead: bool = False) -> InferenceResult:
    """Providers, both compute servers and (optionally) the helper in one process.

    The label is reconstructed from the two servers' output shares, as the
    image provider would.  ``backend`` may map layer names (and
    ``"argmax"``) to ``"dealer"``/``"helper"`` with a ``"default"`` entry.
    """
    m0, m1 = share_model(spec, weights, seed + 1)
    x0, x1 = share_image(image, spec.cfg, seed + 2 if image_seed is None else image_seed)
    metrics = (RunMetrics(), RunMetrics()) if collect_metrics else (None, None)
    tmp = None
    if plan is not None and scratch_dir is None:
        tmp = tempfile.TemporaryDirectory(prefix="aby2cnn-")
        scratch_dir = tmp.name

    def program(ctx, inputs):
        model, img, met = inputs
        sd = None if scratch_dir is None else Path(scratch_dir) / f"party{ctx.index}"
        return run_inference(ctx, spec, model, img, plan, sd, met)

    try:
        run = run_local(program, (m0, x0, metrics[0]), (m1, x1, metrics[1]), backend=backend,
                        seed=seed, cfg=spec.cfg, record=record, lookahead=lookahead)
    finally:
        if tmp is not None:
            tmp.cleanup()
    label = int(reconstruct(*run.results)[0])
    return InferenceResult(label, run.results, run, metrics)
