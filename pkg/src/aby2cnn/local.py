"""Run both compute parties (and the helper, if selected) inside one process.

Parties are threads talking over socketpairs with the same framing the
networked roles use, so transcripts recorded here are real wire bytes.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field

from aby2cnn.correlated import Dealer, HelperClient, HelperServer
from aby2cnn.errors import ConfigurationError, ProtocolError, TransportError
from aby2cnn.net import channel_pair
from aby2cnn.party import Party
from aby2cnn.ring import DEFAULT_CONFIG

BACKENDS = ("dealer", "helper")


@dataclass
class LocalRun:
    results: tuple
    parties: tuple
    party_transcripts: tuple = (None, None)
    helper_transcript: tuple | None = None  # (link to party 0, link to party 1)
    helper_errors: list = field(default_factory=list)


def backend_choice(backend) -> tuple[str, dict]:
    """Split ``"dealer"``, ``"helper"`` or ``{"default": ..., layer: ...}`` into (default, per-layer)."""
    if isinstance(backend, str):
        default, per_layer = backend, {}
    else:
        per_layer = dict(backend)
        default = per_layer.pop("default", "helper")
    for b in (default, *per_layer.values()):
        if b not in BACKENDS:
            raise ConfigurationError(f"backend must be one of {BACKENDS}, got {b!r}")
    return default, per_layer


def make_parties(backend="dealer", seed: int | None = 0, cfg=DEFAULT_CONFIG,
                 lookahead: bool = False, record: bool = False):
    """Two wired-up :class:`Party` objects plus the helper server (or None).

    ``backend`` names one source of correlated randomness for every gate,
    or maps layer names to sources (see :func:`backend_choice`).
    """
    default, per_layer = backend_choice(backend)
    t0, t1 = ([], []) if record else (None, None)
    c0, c1 = channel_pair(("party0->party1", "party1->party0"), (t0, t1))
    helper = None
    pool = ({}, {})
    kinds = {default, *per_layer.values()}
    if "dealer" in kinds:
        dealer = Dealer(0 if seed is None else seed)
        pool[0]["dealer"], pool[1]["dealer"] = dealer.backend(0), dealer.backend(1)
    if "helper" in kinds:
        # one log per link: frame order across the two links depends on thread timing
        htrans = ([], []) if record else (None, None)
        h0, p0 = channel_pair(("helper<-party0", "party0->helper"), (htrans[0], None))
        h1, p1 = channel_pair(("helper<-party1", "party1->helper"), (htrans[1], None))
        helper = HelperServer((h0, h1), seed=0 if seed is None else seed).start()
        helper.transcript = htrans if record else None
        pool[0]["helper"], pool[1]["helper"] = HelperClient(0, p0), HelperClient(1, p1)
    parties = tuple(Party(i, c, pool[i][default], cfg, seed, lookahead) for i, c in enumerate((c0, c1)))
    for i, p in enumerate(parties):
        p.backends = pool[i]
        p.layer_backends = {name: pool[i][b] for name, b in per_layer.items()}
        p.default_backend = pool[i][default]
    return parties, helper


def run_local(program, inputs0, inputs1, backend="dealer", seed: int | None = 0,
              cfg=DEFAULT_CONFIG, lookahead: bool = False, record: bool = False,
              timeout: float = 600.0) -> LocalRun:
    """Run ``program(ctx, inputs)`` at both parties concurrently; re-raise the first failure."""
    parties, helper = make_parties(backend, seed, cfg, lookahead, record)
    results = [None, None]
    errors: list = [None, None]

    def target(i, inputs):
        try:
            results[i] = program(parties[i], inputs)
        except BaseException as exc:  # noqa: BLE001
            errors[i] = exc
            parties[i].channel.abort(f"party {i}: {exc}")
            parties[i].channel.close()

    threads = [threading.Thread(target=target, args=(i, inp), daemon=True, name=f"party{i}")
               for i, inp in enumerate((inputs0, inputs1))]
    for t in threads:
        t.start()
    for t in threads:
        t.join(timeout)
    for p in parties:
        p.channel.close()
        for b in p.backends.values():
            b.close()
    helper_transcript = None
    helper_errors = []
    if helper is not None:
        helper.close()
        helper_transcript = helper.transcript
        helper_errors = helper.errors
    failed = [e for e in errors if e is not None]
    if failed:
        # a peer's abort is a symptom; surface the root cause first
        failed.sort(key=lambda e: isinstance(e, (ProtocolError, TransportError)) and "abort" in str(e)
                    or isinstance(e, TransportError))
        raise failed[0]
    if any(t.is_alive() for t in threads):
        raise TimeoutError("local run did not finish in time")
    return LocalRun(tuple(results), parties,
                    (parties[0].channel.transcript, parties[1].channel.transcript),
                    helper_transcript, helper_errors)
