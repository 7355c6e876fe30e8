"""Arithmetic in Z_{2^k} and the fixed-point codec.

Ring elements are stored as ``numpy.uint64`` arrays.  Native unsigned 64-bit
arithmetic wraps, so the 64-bit ring needs no explicit reduction.  Smaller rings
(the 16-bit test ring used for exhaustive checks) reduce with a mask after every
operation.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import RangeError

U64 = np.uint64


@dataclass(frozen=True)
class Ring:
    bits: int = 64

    def __post_init__(self):
        if not 2 <= self.bits <= 64:
            raise ValueError(f"ring width must be in [2, 64], got {self.bits}")

    @property
    def modulus(self) -> int:
        return 1 << self.bits

    @property
    def mask(self) -> np.uint64:
        return U64((1 << self.bits) - 1)

    def wrap(self, x):
        x = np.asarray(x, dtype=U64)
        if self.bits == 64:
            return x
        return x & self.mask

    def add(self, x, y):
        return self.wrap(np.add(x, y, dtype=U64))

    def sub(self, x, y):
        return self.wrap(np.subtract(x, y, dtype=U64))

    def mul(self, x, y):
        return self.wrap(np.multiply(x, y, dtype=U64))

    def neg(self, x):
        return self.wrap(np.subtract(U64(0), np.asarray(x, dtype=U64), dtype=U64))

    def to_signed(self, x) -> np.ndarray:
        """Two's-complement view as int64."""
        x = self.wrap(x)
        if self.bits == 64:
            return x.view(np.int64)
        v = x.astype(np.int64)
        return np.where(v >= (1 << (self.bits - 1)), v - (1 << self.bits), v)

    def from_signed(self, s) -> np.ndarray:
        s = np.asarray(s, dtype=np.int64)
        return self.wrap(s.astype(U64))

    def random(self, rng: np.random.Generator, shape=()) -> np.ndarray:
        r = rng.integers(0, 1 << 64, size=shape, dtype=U64, endpoint=False)
        return self.wrap(r)


RING64 = Ring(64)
RING16 = Ring(16)


@dataclass(frozen=True)
class FixedPointCodec:
    """Maps reals to ring elements as ``round(x * 2**frac_bits)``.

    Rounding is half-away-from-zero so that ``encode(-x) == -encode(x)``.
    """

    frac_bits: int = 16
    ring: Ring = RING64

    @property
    def limit(self) -> float:
        return float(2 ** (self.ring.bits - 1 - self.frac_bits))

    @property
    def ulp(self) -> float:
        return 2.0 ** -self.frac_bits

    def encode(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if not np.all(np.isfinite(x)):
            raise RangeError("cannot encode non-finite values")
        if x.size and np.max(np.abs(x)) >= self.limit:
            raise RangeError(
                f"|x| = {np.max(np.abs(x))} outside fixed-point range {self.limit}"
            )
        scaled = np.sign(x) * np.floor(np.abs(x) * float(1 << self.frac_bits) + 0.5)
        if scaled.size and np.max(np.abs(scaled)) >= 2.0 ** (self.ring.bits - 1):
            raise RangeError("value rounds outside the ring's signed range")
        return self.ring.from_signed(scaled.astype(np.int64))

    def decode(self, r, scale: int | None = None) -> np.ndarray:
        f = self.frac_bits if scale is None else scale
        return self.ring.to_signed(r).astype(np.float64) / float(1 << f)


DEFAULT_CODEC = FixedPointCodec()


def encode_fixed(x, codec: FixedPointCodec = DEFAULT_CODEC):
    out = codec.encode(x)
    return out[()] if out.ndim == 0 else out


def decode_fixed(r, codec: FixedPointCodec = DEFAULT_CODEC, scale: int | None = None):
    out = codec.decode(r, scale)
    return float(out) if np.ndim(out) == 0 else out


def truncate_plain(r, f: int, ring: Ring = RING64):
    """Arithmetic right shift by ``f`` under the signed interpretation."""
    s = ring.to_signed(r)
    out = ring.from_signed(np.right_shift(s, f))
    return out[()] if out.ndim == 0 else out


def to_bytes(x) -> bytes:
    return np.ascontiguousarray(x, dtype="<u8").tobytes()


def from_bytes(buf: bytes) -> np.ndarray:
    return np.frombuffer(buf, dtype="<u8").astype(U64)
