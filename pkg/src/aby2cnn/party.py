"""Per-party protocol context: peer channel, correlated-randomness backend, masks."""

from __future__ import annotations

import secrets

import numpy as np

from aby2cnn.ring import DEFAULT_CONFIG, FixedPointConfig


def random_words(shape, *key: int) -> np.ndarray:
    """Uniform uint64 words from a Philox stream keyed by ``key``.

    Identical keys give identical streams in any process, which is what
    makes transcripts reproducible under a fixed seed.
    """
    bitgen = np.random.Philox(np.random.SeedSequence([int(k) & ((1 << 64) - 1) for k in key]))
    n = int(np.prod(shape)) if shape != () else 1
    return bitgen.random_raw(n).astype(np.uint64).reshape(shape)


class Party:
    """State one compute server carries through an inference session.

    ``op_id`` values are allocated from a counter; both parties execute the
    same gate schedule so their counters stay in lockstep.  ``exchange``
    is ordered (party 0 sends first) so large payloads cannot deadlock on
    full socket buffers.
    """

    def __init__(self, index: int, channel, backend, cfg: FixedPointConfig = DEFAULT_CONFIG,
                 seed: int | None = None, lookahead: bool = False):
        if index not in (0, 1):
            raise ValueError("party index must be 0 or 1")
        self.index = index
        self.channel = channel
        self.backend = backend
        self.cfg = cfg
        self.seed = secrets.randbits(63) if seed is None else seed
        self.lookahead = lookahead
        self.op_counter = 0
        self.backends = {}
        self.layer_backends = {}
        self.default_backend = backend

    def use_backend_for(self, layer: str):
        """Switch to the backend configured for ``layer`` (the default if none is)."""
        self.backend = self.layer_backends.get(layer, self.default_backend)

    def next_op(self) -> int:
        self.op_counter += 1
        return self.op_counter

    def fresh_mask(self, op_id: int, shape) -> np.ndarray:
        return random_words(shape, self.seed, 0x6D61736B, self.index, op_id)

    def exchange(self, msg_type, op_id: int, payload: bytes) -> bytes:
        if self.index == 0:
            self.channel.send(msg_type, op_id, payload)
            return self.channel.recv(msg_type, op_id)
        peer = self.channel.recv(msg_type, op_id)
        self.channel.send(msg_type, op_id, payload)
        return peer
