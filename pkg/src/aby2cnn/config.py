"""Key-value run configuration: role addresses, model layers, plan, paths.

One ``key = value`` per line, ``#`` starts a comment.  ``layer`` may repeat
and keeps its order.  Relative paths resolve against the config file's
directory.  Example::

    server0 = 127.0.0.1:7000
    input = 1 28 28
    layer = conv cnn1 kernels=5 kernel=5x5 padding=1,0,1,0 strides=2,2 weights=cnn1.w.tns bias=cnn1.b.tns
    layer = dense nn1 rows=100 cols=108 activation=relu weights=nn1.w.tns bias=nn1.b.tns
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

from aby2cnn.conv import ConvParams, conv_output_dims
from aby2cnn.errors import ConfigurationError, ParseError
from aby2cnn.net import Role
from aby2cnn.pipeline import LayerSpec, ModelSpec, reference_model
from aby2cnn.ring import FixedPointConfig

ROLE_KEYS = {
    "server0": Role.SERVER0,
    "server1": Role.SERVER1,
    "helper": Role.HELPER,
    "image_provider": Role.IMAGE_PROVIDER,
    "model_provider": Role.MODEL_PROVIDER,
}


@dataclass
class RunConfig:
    values: dict = field(default_factory=dict)
    layers: list = field(default_factory=list)
    base_dir: Path = Path(".")

    def get(self, key, default=None):
        return self.values.get(key, default)

    def path(self, key) -> Path | None:
        v = self.values.get(key)
        return None if v is None else self.base_dir / v

    def address(self, role: Role | str) -> tuple[str, int] | None:
        key = role if isinstance(role, str) else next(k for k, r in ROLE_KEYS.items() if r == role)
        v = self.values.get(key)
        return None if v is None else parse_address(v)

    def fixed_point(self) -> FixedPointConfig:
        return FixedPointConfig(int(self.get("f", 13)), int(self.get("K", 1 << 14)))

    def model_spec(self) -> ModelSpec:
        cfg = self.fixed_point()
        if not self.layers:
            return reference_model(cfg)
        dims = tuple(int(v) for v in self.get("input", "").replace("x", " ").split())
        if not dims:
            raise ConfigurationError("config lists layers but no 'input' dims")
        layers = []
        cur = dims
        for text in self.layers:
            layer = parse_layer(text, cur)
            layers.append(layer)
            cur = conv_output_dims(cur, layer.conv) if layer.kind == "conv" else (layer.rows,)
        spec = ModelSpec(dims, layers, cfg)
        spec.layer_dims()
        return spec


def parse_address(text: str) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    if not host or not port.isdigit():
        raise ConfigurationError(f"address must be host:port, got {text!r}")
    return host, int(port)


def _ints(text: str, sep=",") -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(sep))


def parse_layer(text: str, in_dims: tuple) -> LayerSpec:
    """Parse one ``layer =`` value; conv input channels come from ``in_dims``."""
    tok = text.split()
    if len(tok) < 2 or tok[0] not in ("conv", "dense"):
        raise ConfigurationError(f"layer must start with 'conv <name>' or 'dense <name>': {text!r}")
    kind, name = tok[0], tok[1]
    kv = {}
    for t in tok[2:]:
        k, eq, v = t.partition("=")
        if not eq:
            raise ConfigurationError(f"layer {name}: expected key=value, got {t!r}")
        kv[k] = v
    act = kv.pop("activation", "relu")
    if act not in ("relu", "none"):
        raise ConfigurationError(f"layer {name}: activation must be relu or none")
    files = {"weights_path": kv.pop("weights", None), "bias_path": kv.pop("bias", None)}
    try:
        if kind == "conv":
            if len(in_dims) != 3:
                raise ConfigurationError(f"layer {name}: conv needs (C, H, W) input, got {in_dims}")
            kr, kc = _ints(kv.pop("kernel"), "x")
            p = ConvParams(int(kv.pop("kernels")), kr, kc, in_dims[0],
                           _ints(kv.pop("strides", "1,1")), _ints(kv.pop("padding", "0,0,0,0")))
            layer = LayerSpec(name, "conv", p, activation=act, **files)
        else:
            layer = LayerSpec(name, "dense", rows=int(kv.pop("rows")), cols=int(kv.pop("cols")),
                              activation=act, **files)
    except (KeyError, ValueError) as exc:
        raise ConfigurationError(f"layer {name}: missing or bad field {exc}") from exc
    if kv:
        raise ConfigurationError(f"layer {name}: unknown fields {sorted(kv)}")
    return layer


def load_config(path) -> RunConfig:
    path = Path(path)
    cfg = RunConfig(base_dir=path.parent)
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, eq, value = line.partition("=")
        if not eq:
            raise ParseError("expected 'key = value'", path, lineno)
        key, value = key.strip(), value.strip()
        if key == "layer":
            cfg.layers.append(value)
        else:
            cfg.values[key] = value
    return cfg


def write_config(path, values: dict, spec: ModelSpec | None = None) -> None:
    """Write a config file; with ``spec`` the layer lines come from it."""
    lines = [f"{k} = {v}" for k, v in values.items()]
    if spec is not None:
        lines.append("input = " + " ".join(str(d) for d in spec.input_dims))
        lines.append(f"f = {spec.cfg.f}")
        lines.append(f"K = {spec.cfg.K}")
        for layer in spec.layers:
            files = ""
            if layer.weights_path:
                files = f" weights={layer.weights_path} bias={layer.bias_path}"
            if layer.kind == "conv":
                p = layer.conv
                lines.append(f"layer = conv {layer.name} kernels={p.n_ker} kernel={p.k_row}x{p.k_col} "
                             f"strides={','.join(map(str, p.strides))} "
                             f"padding={','.join(map(str, p.padding))} activation={layer.activation}{files}")
            else:
                lines.append(f"layer = dense {layer.name} rows={layer.rows} cols={layer.cols} "
                             f"activation={layer.activation}{files}")
    Path(path).write_text("\n".join(lines) + "\n")
