import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mpcroute.errors import RangeError
from mpcroute.ring import (
    RING16,
    RING64,
    FixedPointCodec,
    decode_fixed,
    encode_fixed,
    from_bytes,
    to_bytes,
    truncate_plain,
)

C = FixedPointCodec(16)
u64 = st.integers(0, 2**64 - 1)


def big_decode(r, f=16):
    """Arbitrary-precision reference for the signed fixed-point decode."""
    r = int(r)
    return (r - 2**64 if r >= 2**63 else r) / 2**f


def test_encode_known_values():
    assert int(encode_fixed(0.0, C)) == 0
    assert int(encode_fixed(1.5, C)) == 98304
    assert int(encode_fixed(-0.5, C)) == 2**64 - 32768 == 18446744073709518848


def test_decode_known_values():
    assert decode_fixed(np.uint64(0), C) == 0.0
    assert decode_fixed(np.uint64(98304), C) == 1.5


def test_round_trip_error_bound(rng):
    x = rng.uniform(-1e6, 1e6, 100_000)
    err = np.abs(C.decode(C.encode(x)) - x)
    assert err.max() <= 2.0**-16


def test_encode_negation_symmetry(rng):
    x = rng.uniform(-1e4, 1e4, 10_000)
    # exact half-ulp points exercise the rounding rule
    x = np.concatenate([x, np.array([0.5, 1.5, 2.5]) * 2.0**-16])
    assert np.array_equal(C.encode(-x), RING64.neg(C.encode(x)))


def test_half_rounds_away_from_zero():
    half = 2.0**-17
    assert int(C.encode(half)) == 1
    assert int(RING64.to_signed(C.encode(-half))) == -1


def test_range_errors():
    with pytest.raises(RangeError):
        C.encode(2.0**47)
    with pytest.raises(RangeError):
        C.encode(np.nan)
    assert int(RING64.to_signed(C.encode(2.0**47 - 1))) == (2**47 - 1) * 2**16


def test_wraparound_never_traps():
    top = np.uint64(2**64 - 1)
    assert RING64.add(top, np.uint64(1)) == 0
    assert RING64.sub(np.uint64(0), np.uint64(1)) == top
    assert RING64.mul(np.uint64(2**63), np.uint64(2)) == 0


def test_truncate_examples():
    sq = RING64.from_signed(np.int64(98304 * 98304))  # 1.5 * 1.5 at scale 32
    assert abs(int(RING64.to_signed(truncate_plain(sq, 16))) - int(C.encode(2.25))) <= 1
    assert truncate_plain(np.uint64(0), 16) == 0
    neg2 = RING64.from_signed(np.int64(-2 * 2**32))
    assert truncate_plain(neg2, 16) == C.encode(-2.0)


def test_add_sub_exhaustive_16_bit(rng):
    a = np.arange(1 << 16, dtype=np.uint64)
    b = RING16.random(rng, a.shape)
    assert np.array_equal(RING16.sub(RING16.add(a, b), b), a)


@settings(max_examples=300)
@given(u64, u64)
def test_add_sub_inverse_64(a, b):
    a, b = np.uint64(a), np.uint64(b)
    assert RING64.sub(RING64.add(a, b), b) == a


@settings(max_examples=300)
@given(st.integers(-(2**63) + 1, 2**63 - 1))
def test_signed_round_trip(s):
    assert int(RING64.to_signed(RING64.from_signed(np.int64(s)))) == s


@settings(max_examples=300)
@given(st.floats(-1e9, 1e9), st.floats(-1e9, 1e9))
def test_fixed_point_addition_is_exact(x, y):
    ex, ey = C.encode(x), C.encode(y)
    got = C.decode(RING64.add(ex, ey))
    assert got == C.decode(ex) + C.decode(ey)


@settings(max_examples=300)
@given(u64)
def test_decode_matches_big_integer_reference(r):
    assert float(C.decode(np.uint64(r))) == pytest.approx(big_decode(r), rel=1e-15, abs=0)


def test_signed_view_16_bit():
    assert RING16.to_signed(np.uint64(0x8000)) == -32768
    assert RING16.to_signed(np.uint64(0x7FFF)) == 32767
    assert RING16.from_signed(-1) == 0xFFFF


def test_bytes_little_endian():
    raw = to_bytes(np.array([1, 2**64 - 1], dtype=np.uint64))
    assert raw == b"\x01" + b"\x00" * 7 + b"\xff" * 8
    assert np.array_equal(from_bytes(raw), [1, 2**64 - 1])
