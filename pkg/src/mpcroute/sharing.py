"""Two-party additive secret sharing and dealer-supplied correlated randomness."""
from __future__ import annotations

import struct
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import kernels
from .errors import CorruptFileError, ProtocolError, TripleExhaustedError
from .ring import RING64, U64, Ring


@dataclass
class SharedTensor:
    """One party's additive share of a tensor.

    ``scale`` is the number of fractional bits of the underlying encoded
    real (0 for integer-valued shares such as comparison bits).
    """

    party: int
    data: np.ndarray
    scale: int = 0
    bits: int = 64

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=U64)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ring(self) -> Ring:
        return RING64 if self.bits == 64 else Ring(self.bits)

    def like(self, data, scale: int | None = None) -> "SharedTensor":
        return SharedTensor(self.party, data, self.scale if scale is None else scale, self.bits)

    def __getitem__(self, idx) -> "SharedTensor":
        return self.like(self.data[idx])

    def reshape(self, *shape) -> "SharedTensor":
        return self.like(self.data.reshape(*shape))


Share = SharedTensor


def share(x, rng: np.random.Generator, scale: int = 0, ring: Ring = RING64):
    """Split ring element(s) ``x`` into two uniformly masked shares."""
    x = ring.wrap(x)
    s0 = ring.random(rng, x.shape)
    s1 = ring.sub(x, s0)
    return SharedTensor(0, s0, scale, ring.bits), SharedTensor(1, s1, scale, ring.bits)


def reconstruct(s0: SharedTensor, s1: SharedTensor) -> np.ndarray:
    if {s0.party, s1.party} != {0, 1}:
        raise ProtocolError("reconstruction needs one share from each party")
    if s0.scale != s1.scale or s0.bits != s1.bits:
        raise ProtocolError(f"scale/ring mismatch: {s0.scale}/{s0.bits} vs {s1.scale}/{s1.bits}")
    if s0.shape != s1.shape:
        raise ProtocolError(f"shape mismatch: {s0.shape} vs {s1.shape}")
    out = s0.ring.add(s0.data, s1.data)
    return out[()] if out.ndim == 0 else out


def _check_pair(x: SharedTensor, y: SharedTensor) -> None:
    if x.party != y.party:
        raise ProtocolError("operands belong to different parties")
    if x.scale != y.scale:
        raise ValueError(f"scale mismatch: {x.scale} vs {y.scale}")
    if x.bits != y.bits:
        raise ValueError("ring mismatch")
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")


def add_local(x: SharedTensor, y: SharedTensor) -> SharedTensor:
    _check_pair(x, y)
    return x.like(x.ring.add(x.data, y.data))


def sub_local(x: SharedTensor, y: SharedTensor) -> SharedTensor:
    _check_pair(x, y)
    return x.like(x.ring.sub(x.data, y.data))


def neg_local(x: SharedTensor) -> SharedTensor:
    return x.like(x.ring.neg(x.data))


def add_public(x: SharedTensor, c) -> SharedTensor:
    """Add a public ring constant; only party 0 touches its share."""
    if x.party != 0:
        return x.like(np.broadcast_to(x.data, np.broadcast_shapes(x.shape, np.shape(c))).copy())
    return x.like(x.ring.add(x.data, x.ring.wrap(c)))


def mul_public(x: SharedTensor, c, scale: int = 0) -> SharedTensor:
    """Multiply by a public ring constant carrying ``scale`` fractional bits."""
    return x.like(x.ring.mul(x.data, x.ring.wrap(c)), x.scale + scale)


def matmul_public(x: SharedTensor, w, scale: int = 0) -> SharedTensor:
    """Share-local product with a public matrix."""
    data = kernels.ring_matmul(x.data, x.ring.wrap(w), x.ring.mask)
    return x.like(data, x.scale + scale)


def truncate_shares(x: SharedTensor, f: int) -> SharedTensor:
    """Local share truncation by ``f`` bits.

    Party 0 shifts its share; party 1 shifts the negation of its share and
    negates back.  The reconstruction is within one unit of the exact shift
    except with probability about ``|v| / 2**(bits-1)``.
    """
    ring = x.ring
    if x.party == 0:
        data = ring.wrap(np.right_shift(x.data, U64(f)))
    else:
        data = ring.neg(np.right_shift(ring.neg(x.data), U64(f)))
    return x.like(data, x.scale - f)


# ---------------------------------------------------------------- triples


@dataclass
class BeaverTriple:
    """One party's half of a batch of arithmetic triples (elementwise c = a*b)."""

    party: int
    a: np.ndarray
    b: np.ndarray
    c: np.ndarray
    consumed: bool = False

    def consume(self) -> None:
        if self.consumed:
            raise ProtocolError("Beaver triple reused")
        self.consumed = True


@dataclass
class BooleanTriple:
    """One party's half of a batch of AND triples over XOR shares."""

    party: int
    a: np.ndarray
    b: np.ndarray
    c: np.ndarray
    consumed: bool = False

    def consume(self) -> None:
        if self.consumed:
            raise ProtocolError("boolean triple reused")
        self.consumed = True


@dataclass
class TripleHalf:
    """Flat arrays of one party's triple material as produced by the dealer."""

    party: int
    arith: np.ndarray  # (n, 3) uint64: a, b, c
    boolean: np.ndarray  # (m, 3) uint8: a, b, c


def dealer_generate(n_arith: int, n_bool: int, rng: np.random.Generator) -> tuple[TripleHalf, TripleHalf]:
    """Trusted-dealer triples, split into the two parties' halves."""
    a = RING64.random(rng, n_arith)
    b = RING64.random(rng, n_arith)
    c = RING64.mul(a, b)
    vals = np.stack([a, b, c], axis=1) if n_arith else np.zeros((0, 3), U64)
    mask0 = RING64.random(rng, vals.shape)
    ar0, ar1 = mask0, RING64.sub(vals, mask0)

    ba = rng.integers(0, 2, n_bool, dtype=np.uint8)
    bb = rng.integers(0, 2, n_bool, dtype=np.uint8)
    bvals = np.stack([ba, bb, ba & bb], axis=1) if n_bool else np.zeros((0, 3), np.uint8)
    bmask = rng.integers(0, 2, bvals.shape, dtype=np.uint8)
    return TripleHalf(0, ar0, bmask), TripleHalf(1, ar1, bvals ^ bmask)


class TripleStore:
    """Sequential, single-use supply of one party's triples.

    A store is either fixed (loaded from a dealer file; running out raises
    :class:`TripleExhaustedError`) or backed by a ``refill`` callable that
    returns the next :class:`TripleHalf` chunk on demand.
    """

    def __init__(self, half: TripleHalf | None = None, party: int | None = None,
                 refill: Callable[[int], TripleHalf] | None = None):
        if half is None and party is None:
            raise ValueError("need a triple half or a party id")
        self.party = half.party if half is not None else party
        self._arith = [half.arith] if half is not None else []
        self._bool = [half.boolean] if half is not None else []
        self._apos = self._bpos = 0
        self._refill = refill
        self._chunk = 0
        self.arith_used = 0
        self.bool_used = 0

    def _pull(self) -> None:
        if self._refill is None:
            raise TripleExhaustedError("dealer triples exhausted")
        half = self._refill(self._chunk)
        self._chunk += 1
        self._arith.append(half.arith)
        self._bool.append(half.boolean)

    def _take(self, pool: list, pos: int, n: int, width_dtype):
        parts, need = [], n
        while need:
            if not pool:
                self._pull()
                continue
            avail = len(pool[0]) - pos
            if avail <= 0:
                pool.pop(0)
                pos = 0
                if not pool:
                    self._pull()
                continue
            k = min(avail, need)
            parts.append(pool[0][pos:pos + k])
            pos += k
            need -= k
        out = np.concatenate(parts) if parts else np.zeros((0, 3), width_dtype)
        return out, pos

    def take_arith(self, shape, bits: int = 64) -> BeaverTriple:
        n = int(np.prod(shape, dtype=np.int64))
        rows, self._apos = self._take(self._arith, self._apos, n, U64)
        self.arith_used += n
        ring = RING64 if bits == 64 else Ring(bits)
        a, b, c = (ring.wrap(rows[:, i]).reshape(shape) for i in range(3))
        return BeaverTriple(self.party, a, b, c)

    def take_bool(self, shape) -> BooleanTriple:
        n = int(np.prod(shape, dtype=np.int64))
        rows, self._bpos = self._take(self._bool, self._bpos, n, np.uint8)
        self.bool_used += n
        return BooleanTriple(self.party, *(rows[:, i].reshape(shape) for i in range(3)))

    def remaining(self) -> tuple[int, int]:
        if self._refill is not None:
            return (-1, -1)
        ra = sum(len(p) for p in self._arith) - self._apos
        rb = sum(len(p) for p in self._bool) - self._bpos
        return ra, rb


class StreamingDealer:
    """Deterministic chunked dealer shared by two in-process parties.

    Chunk ``j`` is ``dealer_generate`` under a generator seeded from
    ``(seed, j)``, so the supply is a pure function of the seed regardless of
    which party asks first.
    """

    def __init__(self, seed: int, chunk_arith: int = 1 << 15, chunk_bool: int = 1 << 17):
        self.seed = seed
        self.chunk_arith = chunk_arith
        self.chunk_bool = chunk_bool
        self._lock = threading.Lock()
        self._pending: dict[int, list] = {}

    def _fetch(self, party: int, j: int) -> TripleHalf:
        with self._lock:
            if j not in self._pending:
                rng = np.random.default_rng([self.seed, j])
                self._pending[j] = list(dealer_generate(self.chunk_arith, self.chunk_bool, rng))
            halves = self._pending[j]
            half = halves[party]
            halves[party] = None
            if halves[0] is None and halves[1] is None:
                del self._pending[j]
        return half

    def store(self, party: int) -> TripleStore:
        return TripleStore(party=party, refill=lambda j: self._fetch(party, j))


# ---------------------------------------------------------------- Beaver


def beaver_mul(x: SharedTensor, y: SharedTensor, t: BeaverTriple, net) -> SharedTensor:
    """Elementwise secure product; one exchange opens both masked operands."""
    if x.party != y.party or x.party != t.party:
        raise ProtocolError("operands and triple belong to different parties")
    if x.shape != y.shape or t.a.shape != x.shape:
        raise ValueError(f"shape mismatch: {x.shape}, {y.shape}, triple {t.a.shape}")
    t.consume()
    ring = x.ring
    eps = ring.sub(x.data, t.a)
    dlt = ring.sub(y.data, t.b)
    peer_eps, peer_dlt = net.exchange_tensors([eps, dlt])
    eps = ring.add(eps, peer_eps)
    dlt = ring.add(dlt, peer_dlt)
    z = kernels.beaver_combine(eps, dlt, t.a, t.b, t.c, x.party == 0, ring.mask)
    return SharedTensor(x.party, z, x.scale + y.scale, x.bits)


def beaver_matmul(x: SharedTensor, w: SharedTensor, t: BeaverTriple, net) -> SharedTensor:
    """``x [n,d] @ w [d,m]`` with one triple per scalar multiply-accumulate.

    The triple batch has shape ``(n, d, m)``; all masked openings go out in a
    single exchange.
    """
    if x.party != w.party or x.party != t.party:
        raise ProtocolError("operands and triple belong to different parties")
    (n, d), (d2, m) = x.shape, w.shape
    if d != d2:
        raise ValueError(f"inner dimensions differ: {x.shape} @ {w.shape}")
    if t.a.shape != (n, d, m):
        raise ValueError(f"triple shape {t.a.shape} != {(n, d, m)}")
    t.consume()
    ring = x.ring
    xe = np.broadcast_to(x.data[:, :, None], (n, d, m))
    we = np.broadcast_to(w.data[None, :, :], (n, d, m))
    eps = ring.sub(xe, t.a)
    dlt = ring.sub(we, t.b)
    peer_eps, peer_dlt = net.exchange_tensors([eps, dlt])
    eps = ring.add(eps, peer_eps)
    dlt = ring.add(dlt, peer_dlt)
    z = kernels.beaver_mac(eps, dlt, t.a, t.b, t.c, x.party == 0, ring.mask)
    return SharedTensor(x.party, z, x.scale + w.scale, x.bits)


# ---------------------------------------------------------------- files

TRIPLE_MAGIC = b"SRTRIP"
TRIPLE_VERSION = 1
_TRIPLE_HEAD = struct.Struct("<6sBBQQ")


def save_triples(half: TripleHalf, path) -> None:
    """Layout: magic, version, party, n_arith, n_bool (LE), a/b/c as u64 LE, then a/b/c bytes."""
    with open(path, "wb") as fh:
        fh.write(_TRIPLE_HEAD.pack(TRIPLE_MAGIC, TRIPLE_VERSION, half.party,
                                   len(half.arith), len(half.boolean)))
        fh.write(np.ascontiguousarray(half.arith, dtype="<u8").tobytes())
        fh.write(np.ascontiguousarray(half.boolean, dtype=np.uint8).tobytes())


def load_triples(path) -> TripleHalf:
    raw = Path(path).read_bytes()
    if len(raw) < _TRIPLE_HEAD.size:
        raise CorruptFileError(f"{path}: shorter than the triple-file header")
    magic, version, party, na, nb = _TRIPLE_HEAD.unpack_from(raw)
    if magic != TRIPLE_MAGIC:
        raise CorruptFileError(f"{path}: bad magic {magic!r}")
    if version != TRIPLE_VERSION:
        raise CorruptFileError(f"{path}: unsupported version {version}")
    if party not in (0, 1):
        raise CorruptFileError(f"{path}: bad party id {party}")
    off = _TRIPLE_HEAD.size
    if len(raw) != off + 24 * na + 3 * nb:
        raise CorruptFileError(f"{path}: length does not match header counts")
    arith = np.frombuffer(raw, dtype="<u8", count=3 * na, offset=off).astype(U64).reshape(na, 3)
    off += 24 * na
    boolean = np.frombuffer(raw, dtype=np.uint8, count=3 * nb, offset=off).reshape(nb, 3).copy()
    return TripleHalf(party, arith, boolean)
