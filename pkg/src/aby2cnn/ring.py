"""Fixed-point arithmetic over the ring Z_2^64.

Ring elements are stored as ``numpy.uint64``; numpy's unsigned arithmetic
wraps modulo 2^64, which is exactly the ring semantics needed.  The signed
view (two's complement) is obtained with ``.view(np.int64)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from aby2cnn.errors import ConfigurationError, RangeError

MASK64 = (1 << 64) - 1
U64 = np.uint64


@dataclass(frozen=True)
class FixedPointConfig:
    f: int = 13
    K: int = 1 << 14

    def __post_init__(self):
        if not 0 <= self.f < 62:
            raise ConfigurationError(f"fractional bits must be in [0, 62), got {self.f}")
        if self.K <= (1 << self.f):
            raise ConfigurationError(f"indicator gain K={self.K} must exceed 2^f={1 << self.f}")

    @property
    def one(self) -> int:
        """Ring encoding of 1.0."""
        return 1 << self.f

    @property
    def ulp(self) -> float:
        return 2.0 ** -self.f


DEFAULT_CONFIG = FixedPointConfig()


def as_ring(x) -> np.ndarray:
    """Coerce ints (possibly negative or >= 2^63) to a uint64 array mod 2^64."""
    if isinstance(x, np.ndarray):
        if x.dtype == np.uint64:
            return x
        if x.dtype == np.int64:
            return x.view(np.uint64)
        if np.issubdtype(x.dtype, np.integer) or x.dtype == np.bool_:
            return x.astype(np.int64).view(np.uint64)
    if isinstance(x, (int, np.integer)):
        return np.array(int(x) & MASK64, dtype=U64)
    return np.array([int(v) & MASK64 for v in np.ravel(np.asarray(x, dtype=object))],
                    dtype=U64).reshape(np.shape(x))


def signed(e) -> np.ndarray:
    return as_ring(e).view(np.int64)


def _out_of_range(cfg: FixedPointConfig) -> RangeError:
    return RangeError(f"x must lie in [-2^{63 - cfg.f}, 2^{63 - cfg.f}) for f={cfg.f}")


def encode(x, cfg: FixedPointConfig = DEFAULT_CONFIG) -> np.ndarray:
    """Encode reals as ring elements with ``cfg.f`` fractional bits.

    Rounds half away from zero.  The accepted range is the two's-complement
    one, ``-2^(63-f) <= x < 2^(63-f)``; anything else raises
    :class:`RangeError`.  ``Fraction`` inputs (or object arrays of them) are
    encoded exactly; floats go through float64.
    """
    if isinstance(x, Fraction) or (isinstance(x, np.ndarray) and x.dtype == object):
        return _encode_exact(np.asarray(x, dtype=object), cfg)
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise RangeError("cannot encode non-finite values")
    limit = 2.0 ** (63 - cfg.f)
    if np.any(arr >= limit) or np.any(arr < -limit):
        raise _out_of_range(cfg)
    scaled = np.sign(arr) * np.floor(np.abs(arr) * (1 << cfg.f) + 0.5)
    # float rounding can push a value just below the limit onto 2^63
    if np.any(scaled >= 2.0 ** 63) or np.any(scaled < -(2.0 ** 63)):
        raise _out_of_range(cfg)
    return scaled.astype(np.int64).view(U64)


def _encode_exact(arr: np.ndarray, cfg: FixedPointConfig) -> np.ndarray:
    out = []
    for v in arr.ravel():
        q = Fraction(v)
        n = math.floor(abs(q) * (1 << cfg.f) + Fraction(1, 2))
        n = n if q >= 0 else -n
        if not -(1 << 63) <= n < (1 << 63):
            raise _out_of_range(cfg)
        out.append(n & MASK64)
    return np.array(out, dtype=U64).reshape(arr.shape)


def decode(e, cfg: FixedPointConfig = DEFAULT_CONFIG, exact: bool = False) -> np.ndarray:
    """Signed value over ``2^f``; float64 by default, ``Fraction`` objects with ``exact``."""
    if exact:
        s = signed(e)
        vals = [Fraction(int(v), 1 << cfg.f) for v in s.ravel()]
        return np.array(vals + [None], dtype=object)[:-1].reshape(s.shape)
    return signed(e).astype(np.float64) / float(1 << cfg.f)


def truncate_part(part, role: int, cfg: FixedPointConfig = DEFAULT_CONFIG) -> np.ndarray:
    """Locally rescale one party's additive part of a 2f-scaled value.

    Party 0 shifts its signed part right by ``f``; party 1 negates, shifts
    and negates back.  The two results sum to the truncated value within
    one ulp, except with probability about ``|value| / 2^63``.
    """
    p = as_ring(part)
    if role == 0:
        return (p.view(np.int64) >> cfg.f).view(U64)
    if role == 1:
        neg = np.negative(p).view(np.int64) >> cfg.f
        return np.negative(neg.view(U64))
    raise ValueError(f"role must be 0 or 1, got {role}")


def truncate_clear(x, cfg: FixedPointConfig = DEFAULT_CONFIG) -> np.ndarray:
    """Floor-truncation of a clear 2f-scaled value (the oracle's rounding rule)."""
    return (as_ring(x).view(np.int64) >> cfg.f).view(U64)


def to_words(x: np.ndarray) -> bytes:
    return np.ascontiguousarray(x, dtype="<u8").tobytes()


def from_words(buf, count: int | None = None, offset: int = 0) -> np.ndarray:
    return np.frombuffer(buf, dtype="<u8", count=-1 if count is None else count,
                         offset=offset).astype(U64)
