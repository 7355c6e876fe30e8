"""Secure operators evaluated jointly by the two compute parties.

Every function here runs on *one* party's shares; the peer runs the same
call in lockstep.  ``ctx`` is a :class:`PartyContext` bundling the party's
link to the peer and its triple supply.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ring import U64, FixedPointCodec, DEFAULT_CODEC
from .sharing import (
    SharedTensor,
    TripleStore,
    add_local,
    add_public,
    beaver_matmul,
    beaver_mul,
    mul_public,
    neg_local,
    sub_local,
    truncate_shares,
)


@dataclass
class PartyContext:
    party: int
    net: object
    triples: TripleStore
    codec: FixedPointCodec = DEFAULT_CODEC


@dataclass
class BitSharedVector:
    """XOR shares of the bit decomposition, least significant bit first."""

    party: int
    bits: np.ndarray  # uint8, shape (..., nbits)

    @property
    def nbits(self) -> int:
        return self.bits.shape[-1]


@dataclass
class OneHotSelection:
    share: SharedTensor  # length-k integer shares of a one-hot vector

    @property
    def k(self) -> int:
        return self.share.shape[-1]


def _pack(bits: np.ndarray) -> np.ndarray:
    """Pack a flat 0/1 vector into little-endian 64-bit words for the wire."""
    packed = np.packbits(bits.reshape(-1), bitorder="little")
    pad = (-len(packed)) % 8
    if pad:
        packed = np.concatenate([packed, np.zeros(pad, np.uint8)])
    return packed.view("<u8").astype(U64)


def _unpack(words: np.ndarray, n: int) -> np.ndarray:
    raw = np.ascontiguousarray(words, dtype="<u8").view(np.uint8)
    return np.unpackbits(raw, bitorder="little")[:n]


def secure_and(x: np.ndarray, y: np.ndarray, ctx: PartyContext) -> np.ndarray:
    """AND of XOR-shared bit arrays with one boolean triple per gate, one round."""
    t = ctx.triples.take_bool(x.shape)
    t.consume()
    d = x ^ t.a
    e = y ^ t.b
    flat = np.concatenate([d.reshape(-1), e.reshape(-1)])
    (peer,) = ctx.net.exchange_tensors([_pack(flat)])
    opened = flat ^ _unpack(peer, flat.size)
    d = opened[: x.size].reshape(x.shape)
    e = opened[x.size:].reshape(x.shape)
    z = t.c ^ (d & t.b) ^ (e & t.a)
    if ctx.party == 0:
        z = z ^ (d & e)
    return z


def bit_decompose(data: np.ndarray, nbits: int) -> np.ndarray:
    shifts = np.arange(nbits, dtype=U64)
    return ((data[..., None] >> shifts) & U64(1)).astype(np.uint8)


def a2b(x: SharedTensor, ctx: PartyContext) -> BitSharedVector:
    """Arithmetic to XOR-shared bits via a ripple-carry adder.

    The two addends are the parties' own shares: party 0's bits are XOR-shared
    as ``(bits, 0)`` and party 1's as ``(0, bits)``.  Each carry level costs one
    round with two AND gates per element; the carry out of the top bit is
    never needed, so a ``k``-bit ring takes ``k - 1`` rounds.
    """
    n = x.bits
    own = bit_decompose(x.data, n)
    zero = np.zeros_like(own)
    a_bits = own if ctx.party == 0 else zero
    b_bits = zero if ctx.party == 0 else own
    prop = a_bits ^ b_bits
    carry = np.zeros(x.shape, dtype=np.uint8)
    out = np.empty_like(own)
    for i in range(n):
        out[..., i] = prop[..., i] ^ carry
        if i == n - 1:
            break
        gates = secure_and(
            np.stack([a_bits[..., i], carry]),
            np.stack([b_bits[..., i], prop[..., i]]),
            ctx,
        )
        carry = gates[0] ^ gates[1]
    return BitSharedVector(ctx.party, out)


def b2a(bit: np.ndarray, ctx: PartyContext, bits: int = 64) -> SharedTensor:
    """XOR-shared bits to arithmetic shares: b0 + b1 - 2*b0*b1."""
    own = bit.astype(U64)
    zero = np.zeros_like(own)
    mine = SharedTensor(ctx.party, own if ctx.party == 0 else zero, 0, bits)
    theirs = SharedTensor(ctx.party, zero if ctx.party == 0 else own, 0, bits)
    prod = beaver_mul(mine, theirs, ctx.triples.take_arith(own.shape, bits), ctx.net)
    s = add_local(mine, theirs)
    return sub_local(s, mul_public(prod, 2))


def drelu(x: SharedTensor, ctx: PartyContext) -> SharedTensor:
    """Integer shares of ``1{x >= 0}`` under the signed interpretation."""
    msb = a2b(x, ctx).bits[..., -1]
    if ctx.party == 0:
        msb = msb ^ np.uint8(1)
    return b2a(msb, ctx, x.bits)


def relu(x: SharedTensor, ctx: PartyContext) -> SharedTensor:
    d = drelu(x, ctx)
    return beaver_mul(x, d, ctx.triples.take_arith(x.shape, x.bits), ctx.net)


def secure_linear(x: SharedTensor, w: SharedTensor, b: SharedTensor, ctx: PartyContext) -> SharedTensor:
    """``x @ w + b`` at the codec scale; one round for the batched openings."""
    f = ctx.codec.frac_bits
    if x.scale != f or w.scale != f or b.scale != f:
        raise ValueError(f"secure_linear expects scale {f}, got {x.scale}/{w.scale}/{b.scale}")
    squeeze = x.data.ndim == 1
    if squeeze:
        x = x.reshape(1, -1)
    n, d = x.shape
    if w.shape[0] != d or b.shape != (w.shape[1],):
        raise ValueError(f"shape mismatch: x {x.shape}, w {w.shape}, b {b.shape}")
    t = ctx.triples.take_arith((n, d, w.shape[1]), x.bits)
    prod = truncate_shares(beaver_matmul(x, w, t, ctx.net), f)
    out = prod.like(prod.ring.add(prod.data, b.data[None, :]))
    return out.reshape(-1) if squeeze else out


def secure_argmax_with_max(v: SharedTensor, ctx: PartyContext) -> tuple[OneHotSelection, SharedTensor]:
    """Linear scan over the last axis; ties resolve to the lowest index.

    Leading axes are independent problems evaluated in the same rounds.
    """
    k = v.shape[-1]
    if k < 1:
        raise ValueError("argmax over an empty vector")
    batch = v.shape[:-1]
    eye = np.eye(k, dtype=U64)
    onehot = SharedTensor(ctx.party, np.zeros(batch + (k,), U64), 0, v.bits)
    onehot = add_public(onehot, np.broadcast_to(eye[0], batch + (k,)))
    best = v[..., 0]
    for i in range(1, k):
        vi = v[..., i]
        gap = sub_local(vi, best)
        # strict improvement needed: v_i - best - 1ulp >= 0
        c = drelu(add_public(gap, v.ring.neg(np.ones(batch, U64))), ctx)
        step = add_public(neg_local(onehot), np.broadcast_to(eye[i], batch + (k,)))
        cb = c.like(np.ascontiguousarray(np.broadcast_to(c.data[..., None], batch + (k,))))
        onehot = add_local(onehot, beaver_mul(cb, step, ctx.triples.take_arith(cb.shape, v.bits), ctx.net))
        best = add_local(best, beaver_mul(c, gap, ctx.triples.take_arith(c.shape, v.bits), ctx.net))
    return OneHotSelection(onehot), best


def secure_argmax(v: SharedTensor, ctx: PartyContext) -> OneHotSelection:
    return secure_argmax_with_max(v, ctx)[0]


def oblivious_select(sel: OneHotSelection, pool: SharedTensor, ctx: PartyContext) -> SharedTensor:
    """Row ``i`` of ``pool [k, P]`` for the shared one-hot ``i``.

    Computed as the shared inner product ``sum_i sel_i * pool_i``; the
    transcript length depends only on ``(k, P)``.
    """
    s = sel.share
    if s.data.ndim != 1 or pool.data.ndim != 2 or pool.shape[0] != s.shape[0]:
        raise ValueError(f"selection {s.shape} does not match pool {pool.shape}")
    k, p = pool.shape
    t = ctx.triples.take_arith((1, k, p), pool.bits)
    row = beaver_matmul(s.reshape(1, k), pool, t, ctx.net)
    return row.reshape(p)


def open_shares(x: SharedTensor, ctx: PartyContext) -> np.ndarray:
    """Reveal ``x`` to both parties (one round)."""
    (peer,) = ctx.net.exchange_tensors([x.data])
    return x.ring.add(x.data, peer)


def secure_expert_forward(e: SharedTensor, params: SharedTensor, arch, ctx: PartyContext) -> SharedTensor:
    """Evaluate an MLP expert on shared input with shared flat parameters."""
    if params.data.ndim != 1 or params.shape[0] != arch.param_count:
        raise ValueError(f"parameter vector of length {params.shape} does not match {arch.name} "
                         f"({arch.param_count} parameters)")
    h = e.reshape(-1)
    if h.shape[0] != arch.widths[0]:
        raise ValueError(f"input width {h.shape[0]} != expert input {arch.widths[0]}")
    layers = arch.layout()
    for li, ((w_off, w_shape), (b_off, b_shape)) in enumerate(layers):
        w = params.like(params.data[w_off:w_off + w_shape[0] * w_shape[1]].reshape(w_shape))
        b = params.like(params.data[b_off:b_off + b_shape[0]])
        h = secure_linear(h, w, b, ctx)
        if li < len(layers) - 1:
            h = relu(h, ctx)
    return h
