"""Command-line entry points: networked roles, clear oracle, planning, local runs, reports.

Every subcommand takes the same flags; values given on the command line
override the config file.
"""

from __future__ import annotations

import argparse
import logging
import secrets
import sys
from pathlib import Path

import numpy as np

from aby2cnn.config import RunConfig, load_config, parse_address, write_config
from aby2cnn.conv import conv_output_dims
from aby2cnn.correlated import HelperClient, HelperServer
from aby2cnn.errors import Aby2Error, ConfigurationError
from aby2cnn.metrics import RunMetrics
from aby2cnn.net import (Role, SessionConfig, accept, connect, listener, provider_upload, push_result,
                         receive_upload, result_download)
from aby2cnn.party import Party
from aby2cnn.pipeline import (ingest_image, ingest_model, oracle_inference, random_weights, reference_model,
                              run_inference, run_local_inference, save_model, share_image, share_model,
                              write_tensor)
from aby2cnn.splitter import SplitPlan, chunk_output_rows, horizontal_split_indices

log = logging.getLogger("aby2cnn")

ROLE_COMMANDS = ("server0", "server1", "helper", "image-provider", "model-provider")


class UsageError(Exception):
    """Bad flag combination or missing setting; reported like an argparse error."""


def _split_list(text: str | None, flag: str) -> tuple[int, ...]:
    if text is None or text == "":
        return ()
    try:
        vals = tuple(int(v) for v in str(text).split(","))
    except ValueError as exc:
        raise UsageError(f"{flag} expects comma-separated integers, got {text!r}") from exc
    if any(v < 1 for v in vals):
        raise UsageError(f"{flag} values must be >= 1, got {text!r}")
    return vals


class Settings:
    """Command-line flags layered over the config file."""

    def __init__(self, args: argparse.Namespace):
        self.args = args
        self.cfg = load_config(args.config) if args.config else RunConfig()
        self.spec = self.cfg.model_spec()

    def value(self, flag: str, key: str | None = None, default=None):
        v = getattr(self.args, flag, None)
        if v is not None:
            return v
        return self.cfg.get(key or flag, default)

    @property
    def seed(self) -> int | None:
        v = self.value("seed")
        return None if v is None else int(v)

    @property
    def backend(self) -> str:
        b = self.value("backend", default="helper")
        if b not in ("dealer", "helper"):
            raise UsageError(f"--backend must be dealer or helper, got {b!r}")
        return b

    def layer_backends(self):
        """The backend, or a per-layer map when ``--layer-backend`` is given."""
        entries = getattr(self.args, "layer_backend", None) or ()
        if not entries:
            return self.backend
        names = {layer.name for layer in self.spec.layers} | {"argmax"}
        choice = {"default": self.backend}
        for e in entries:
            name, eq, b = e.partition("=")
            if not eq or name not in names or b not in ("dealer", "helper"):
                raise UsageError(f"--layer-backend expects LAYER=dealer|helper with LAYER in "
                                 f"{sorted(names)}, got {e!r}")
            choice[name] = b
        return choice

    @property
    def timeout(self) -> float:
        return float(self.cfg.get("timeout", 300))

    def plan(self) -> SplitPlan | None:
        cnn = _split_list(self.value("cnn_split"), "--cnn-split")
        nn = _split_list(self.value("nn_split"), "--nn-split")
        hs = _split_list(self.value("hsplit"), "--hsplit")
        n_conv = sum(layer.kind == "conv" for layer in self.spec.layers)
        n_dense = len(self.spec.layers) - n_conv
        if len(cnn) > n_conv:
            raise UsageError(f"--cnn-split lists {len(cnn)} values but the model has {n_conv} conv layers")
        if len(nn) > n_dense:
            raise UsageError(f"--nn-split lists {len(nn)} values but the model has {n_dense} dense layers")
        if len(hs) == 1:
            hs = hs * n_conv
        elif len(hs) > n_conv:
            raise UsageError(f"--hsplit lists {len(hs)} values but the model has {n_conv} conv layers")
        if not (cnn or nn or hs) and self.cfg.get("scratch") is None:
            return None
        plan = SplitPlan(cnn, hs, nn, chunk_mode=self.cfg.get("chunk_mode", "inline"))
        self.validate_plan(plan)
        return plan

    def validate_plan(self, plan: SplitPlan):
        dims = tuple(self.spec.input_dims)
        j = 0
        for layer in self.spec.layers:
            if layer.kind == "conv":
                v, nh = plan.conv(j)
                j += 1
                p = layer.conv
                if v > p.n_ker:
                    raise UsageError(f"{layer.name}: {v} kernel groups but only {p.n_ker} kernels")
                try:
                    horizontal_split_indices(dims[1], p.k_row, p.strides[0], p.padding[0], p.padding[1], nh)
                except ConfigurationError as exc:
                    raise UsageError(f"{layer.name}: {exc}") from exc
                dims = conv_output_dims(dims, p)
            else:
                dims = (layer.rows,)
        for j, layer in enumerate(lyr for lyr in self.spec.layers if lyr.kind == "dense"):
            if plan.dense(j) > layer.rows:
                raise UsageError(f"{layer.name}: {plan.dense(j)} splits but only {layer.rows} weight rows")

    def session(self, role: Role) -> SessionConfig:
        return SessionConfig(role, session_id=int(self.cfg.get("session_id", 1)), seed=self.seed,
                             fixed_point=self.spec.cfg, timeout=self.timeout)

    def address(self, key: str, what: str):
        v = self.cfg.get(key)
        if v is None:
            raise UsageError(f"no '{key}' address in the config ({what})")
        return parse_address(v)

    def image_path(self) -> Path:
        if getattr(self.args, "image", None):
            return Path(self.args.image)
        p = self.cfg.path("image")
        if p is None:
            raise UsageError("no image: pass --image or set 'image' in the config")
        return p

    def scratch(self) -> Path | None:
        return self.cfg.path("scratch")

    def metrics_path(self) -> str | None:
        return self.value("metrics")


# -- roles ----------------------------------------------------------------
def _upload_names(spec) -> list[str]:
    return [f"{layer.name}.{part}" for layer in spec.layers for part in ("w", "b")]


def cmd_server(s: Settings, index: int) -> int:
    me, peer = f"server{index}", f"server{1 - index}"
    own = s.address(me, "listening address")
    peer_addr = s.address(peer, f"{me} needs its peer's address")
    if s.backend != "helper":
        raise UsageError("networked servers need --backend helper (the dealer only exists inside one process)")
    helper_addr = s.address("helper", f"{me} with the helper backend")
    plan = s.plan()
    role = Role(index)
    sc = s.session(role)
    srv = listener(own)
    sessions = {}
    try:
        if index == 1:
            sessions[Role.SERVER0] = connect(peer_addr, sc, expect=Role.SERVER0, retry_for=s.timeout,
                                             name="party1->party0")
        want = {Role.MODEL_PROVIDER, Role.IMAGE_PROVIDER} | ({Role.SERVER1} if index == 0 else set())
        while want:
            sess = accept(srv, sc, expect=set(want))
            sessions[sess.peer_role] = sess
            want.discard(sess.peer_role)
    finally:
        srv.close()
    peer_role = Role.SERVER1 if index == 0 else Role.SERVER0
    model = {}
    names = _upload_names(s.spec)
    for _ in names:
        name, share = receive_upload(sessions[Role.MODEL_PROVIDER], index)
        model[name] = share
    if sorted(model) != sorted(names):
        raise ConfigurationError(f"model provider sent {sorted(model)}, expected {sorted(names)}")
    shares = {}
    for layer in s.spec.layers:
        w, b = model[f"{layer.name}.w"], model[f"{layer.name}.b"]
        if w.shape != layer.weight_shape or b.shape != layer.bias_shape:
            raise ConfigurationError(f"{layer.name}: uploaded dims {w.shape}/{b.shape} do not match the config")
        shares[layer.name] = (w, b)
    _, image = receive_upload(sessions[Role.IMAGE_PROVIDER], index)
    backend = HelperClient(index, address=helper_addr, session_cfg=sc, retry_for=s.timeout)
    ctx = Party(index, sessions[peer_role].channel, backend, s.spec.cfg, s.seed)
    metrics = RunMetrics() if s.metrics_path() else None
    scratch = s.scratch()
    if plan is not None and scratch is None:
        raise UsageError("a split plan needs 'scratch' set in the config")
    try:
        label_share = run_inference(ctx, s.spec, shares, image, plan,
                                    None if scratch is None else scratch / me, metrics)
    except BaseException as exc:
        for sess in sessions.values():
            sess.channel.abort(f"{me}: {exc}")
        raise
    push_result(sessions[Role.IMAGE_PROVIDER], label_share)
    if metrics is not None:
        metrics.write_csv(s.metrics_path())
    for sess in sessions.values():
        sess.channel.close()
    backend.close()
    log.info("%s: done after %d gates", me, ctx.op_counter)
    return 0


def cmd_helper(s: Settings) -> int:
    sc = s.session(Role.HELPER)
    srv = listener(s.address("helper", "helper"))
    got = {}
    try:
        while len(got) < 2:
            sess = accept(srv, sc, expect={Role.SERVER0, Role.SERVER1} - set(got))
            got[sess.peer_role] = sess
    finally:
        srv.close()
    seed = s.seed if s.seed is not None else secrets.randbits(63)
    helper = HelperServer((got[Role.SERVER0].channel, got[Role.SERVER1].channel), seed).start()
    helper.join()
    helper.close()
    if helper.errors:
        raise helper.errors[0]
    return 0


def _server_sessions(s: Settings, role: Role):
    sc = s.session(role)
    return [connect(s.address(f"server{i}", role.name.lower()), sc, expect=Role(i), retry_for=s.timeout)
            for i in (0, 1)]


def cmd_image_provider(s: Settings) -> int:
    image = ingest_image(s.image_path(), s.spec)
    seed = None if s.seed is None else s.seed + 2
    shares = share_image(image, s.spec.cfg, seed)
    sessions = _server_sessions(s, Role.IMAGE_PROVIDER)
    for sess, sh in zip(sessions, shares):
        provider_upload(sess, "image", sh)
    label = int(result_download(sessions)[0])
    for sess in sessions:
        sess.channel.close()
    print(label)
    return 0


def cmd_model_provider(s: Settings) -> int:
    weights = ingest_model(s.spec, s.cfg.base_dir)
    seed = None if s.seed is None else s.seed + 1
    per_party = share_model(s.spec, weights, seed)
    sessions = _server_sessions(s, Role.MODEL_PROVIDER)
    for i, sess in enumerate(sessions):
        for layer in s.spec.layers:
            w, b = per_party[i][layer.name]
            provider_upload(sess, f"{layer.name}.w", w)
            provider_upload(sess, f"{layer.name}.b", b)
    for sess in sessions:
        sess.channel.close()
    return 0


# -- local commands -------------------------------------------------------
def cmd_oracle(s: Settings) -> int:
    weights = ingest_model(s.spec, s.cfg.base_dir)
    print(oracle_inference(s.spec, weights, ingest_image(s.image_path(), s.spec)))
    return 0


def cmd_run(s: Settings) -> int:
    """Whole inference in one process: providers, both servers and the helper."""
    weights = ingest_model(s.spec, s.cfg.base_dir)
    image = ingest_image(s.image_path(), s.spec)
    seed = 0 if s.seed is None else s.seed
    res = run_local_inference(s.spec, weights, image, s.plan(), s.layer_backends(), seed,
                              scratch_dir=s.scratch(), collect_metrics=bool(s.metrics_path()),
                              image_seed=None if s.seed is not None else secrets.randbits(62))
    if s.metrics_path():
        merged = RunMetrics(res.metrics[0].records + res.metrics[1].records)
        merged.write_csv(s.metrics_path())
    print(res.label)
    return 0


def cmd_plan(s: Settings) -> int:
    """Layer output dims, multiplication counts and horizontal-split index tables."""
    spec = s.spec
    plan = s.plan() or SplitPlan()
    print("layer,kind,out_dims,multiplications")
    for layer, dims, n in zip(spec.layers, spec.layer_dims(), spec.mult_counts()):
        print(f"{layer.name},{layer.kind},{'x'.join(map(str, dims))},{n}")
    dims = tuple(spec.input_dims)
    j = 0
    for layer in spec.layers:
        if layer.kind == "conv":
            p = layer.conv
            v, nh = plan.conv(j)
            j += 1
            ranges = horizontal_split_indices(dims[1], p.k_row, p.strides[0], p.padding[0], p.padding[1], nh)
            rows = chunk_output_rows(ranges, p.k_row, p.strides[0])
            print()
            print(f"# {layer.name}: n_h={nh}, kernel groups={v}, padded input rows 1..{dims[1] + p.padding[0] + p.padding[1]}")
            print("chunk,row_start,row_end,out_rows")
            for c, (r, n) in enumerate(zip(ranges, rows), start=1):
                print(f"{c},{r.start},{r.end},{n}")
            dims = conv_output_dims(dims, p)
    return 0


def cmd_sample(s: Settings) -> int:
    """Write a random reference-architecture model, an image and a loopback config."""
    out = Path(s.args.out)
    rng = np.random.default_rng(0 if s.seed is None else s.seed)
    spec = reference_model()
    weights = random_weights(spec, rng)
    spec = save_model(spec, weights, out)
    write_tensor(out / "image.tns", rng.uniform(0, 1, spec.input_dims))
    base = int(s.args.port)
    values = {"server0": f"127.0.0.1:{base}", "server1": f"127.0.0.1:{base + 1}",
              "helper": f"127.0.0.1:{base + 2}", "session_id": 1, "image": "image.tns",
              "scratch": "scratch", "backend": "helper"}
    write_config(out / "run.cfg", values, spec)
    print(out / "run.cfg")
    return 0


def cmd_report(s: Settings) -> int:
    from aby2cnn import report

    out = Path(s.args.out)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    if s.metrics_path():
        written += report.metrics_report(s.metrics_path(), out)
    for name in s.args.bench or ():
        written += report.BENCHES[name](out, seed=0 if s.seed is None else s.seed)
    if not written:
        raise UsageError("report needs --metrics <csv> and/or --bench <name>")
    for p in written:
        print(p)
    return 0


COMMANDS = {
    "server0": lambda s: cmd_server(s, 0),
    "server1": lambda s: cmd_server(s, 1),
    "helper": cmd_helper,
    "image-provider": cmd_image_provider,
    "model-provider": cmd_model_provider,
    "oracle": cmd_oracle,
    "plan": cmd_plan,
    "run": cmd_run,
    "sample": cmd_sample,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key-value config file")
    common.add_argument("--backend", choices=("dealer", "helper"), help="source of multiplication cross terms")
    common.add_argument("--cnn-split", dest="cnn_split", metavar="A,B", help="kernel groups per conv layer")
    common.add_argument("--nn-split", dest="nn_split", metavar="A,B", help="weight-row blocks per dense layer")
    common.add_argument("--hsplit", metavar="N", help="row bands per conv layer (one value applies to all)")
    common.add_argument("--seed", type=int, help="test mode: derive every mask from this seed")
    common.add_argument("--metrics", metavar="PATH", help="write per-unit metrics CSV here")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="aby2cnn", description="Two-server secure CNN inference.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ROLE_COMMANDS:
        sub.add_parser(name, parents=[common], help=f"run the {name} role")
    p = sub.add_parser("oracle", parents=[common], help="clear fixed-point inference")
    p.add_argument("--image")
    sub.add_parser("plan", parents=[common], help="print layer dims, multiplication counts, split tables")
    p = sub.add_parser("run", parents=[common], help="all roles in one process")
    p.add_argument("--image")
    p.add_argument("--layer-backend", dest="layer_backend", action="append", metavar="LAYER=BACKEND",
                   help="per-layer source of cross terms, e.g. nn1=dealer (repeatable; 'argmax' allowed)")
    p = sub.add_parser("sample", parents=[common], help="write a random model, image and config")
    p.add_argument("--out", required=True)
    p.add_argument("--port", type=int, default=7400, help="first of three loopback ports")
    p = sub.add_parser("report", parents=[common], help="render figures and CSV tables")
    p.add_argument("--out", required=True)
    p.add_argument("--bench", action="append", choices=("indicator", "argmax", "splits", "memory"))
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](Settings(args))
    except UsageError as exc:
        parser.error(f"{args.command}: {exc}")
    except Aby2Error as exc:
        print(f"aby2cnn {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
