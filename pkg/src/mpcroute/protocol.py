"""Online routed inference between a client and two compute parties.

The client secret-shares its embedding, the parties evaluate the shared
router, a secure argmax over its logits, retrieve the selected expert's
parameters and run it, and the client recombines the two output shares.

Two retrieval modes exist.  ``oblivious`` keeps the index secret and runs the
zero-padded envelope architecture; ``revealed`` opens the index to the parties
so only the (possibly much smaller) selected expert runs.
"""
from __future__ import annotations

import struct
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import HandshakeError, ProtocolError
from .modelpool import (
    ModelPool,
    PoolShares,
    RouterPolicy,
    RouterShares,
    envelope,
    secret_share_pool,
    secret_share_router,
)
from .ring import DEFAULT_CODEC, FixedPointCodec, truncate_plain
from .secure_ops import (
    PartyContext,
    open_shares,
    oblivious_select,
    relu,
    secure_argmax,
    secure_expert_forward,
    secure_linear,
)
from .sharing import (
    SharedTensor,
    StreamingDealer,
    TripleStore,
    mul_public,
    reconstruct,
    share,
    truncate_shares,
)
from .transport import Endpoint, Message, Tag, inprocess_pair, socket_pair

PROTOCOL_VERSION = 1
MODES = ("oblivious", "revealed")
_HANDSHAKE = struct.Struct("<BB32s32s")


@dataclass
class ClientResult:
    logits: np.ndarray
    label: int
    seconds: float = 0.0


@dataclass
class InferenceSession:
    """One compute party's state for a sequence of routed inferences."""

    ctx: PartyContext
    pool: PoolShares
    router: RouterShares
    mode: str = "revealed"
    session_id: int = 0
    log: list = field(default_factory=list)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.pool.party != self.ctx.party or self.router.party != self.ctx.party:
            raise ProtocolError("share files belong to a different party")
        if self.router.w2.shape[1] != self.pool.k:
            raise ProtocolError(f"router width {self.router.w2.shape[1]} != pool size {self.pool.k}")

    @property
    def party(self) -> int:
        return self.ctx.party

    @property
    def net(self) -> Endpoint:
        return self.ctx.net

    def handshake_frame(self) -> bytes:
        return _HANDSHAKE.pack(PROTOCOL_VERSION, MODES.index(self.mode),
                               self.pool.digest(), self.router.digest())

    def handshake(self) -> None:
        mine = self.handshake_frame()
        peer = self.net.exchange(mine, tag=Tag.HANDSHAKE)
        self.net.snapshot_stats("io")
        if peer != mine:
            if len(peer) != _HANDSHAKE.size:
                raise HandshakeError("malformed handshake frame")
            v, m, ph, rh = _HANDSHAKE.unpack(peer)
            what = ("protocol version" if v != PROTOCOL_VERSION else
                    "mode" if m != MODES.index(self.mode) else
                    "pool hash" if ph != self.pool.digest() else "router hash")
            raise HandshakeError(f"peer disagrees on {what}")


def client_prepare(e, rng: np.random.Generator, codec: FixedPointCodec = DEFAULT_CODEC):
    """Encode and share an embedding ``e [seq, d]``."""
    return share(codec.encode(e), rng, codec.frac_bits, codec.ring)


def client_finish(y0: SharedTensor, y1: SharedTensor, codec: FixedPointCodec = DEFAULT_CODEC,
                  seconds: float = 0.0) -> ClientResult:
    logits = codec.decode(reconstruct(y0, y1), y0.scale)
    logits = np.atleast_1d(logits)
    return ClientResult(logits, int(np.argmax(logits)), seconds)


def _summary(e: SharedTensor, seq_len: int, codec: FixedPointCodec) -> SharedTensor:
    if e.data.ndim != 2 or e.shape[0] != seq_len:
        raise ValueError(f"embedding shares must be [{seq_len}, d], got {e.shape}")
    total = e.like(e.data.sum(axis=0, dtype=np.uint64))
    if seq_len == 1:
        return total
    inv = codec.encode(1.0 / seq_len)
    return truncate_shares(mul_public(total, inv, codec.frac_bits), codec.frac_bits)


def secure_router_logits(e: SharedTensor, r: RouterShares, ctx: PartyContext) -> SharedTensor:
    """Mean-pool summary followed by the two-layer router MLP."""
    s = _summary(e, r.seq_len, ctx.codec)
    h = relu(secure_linear(s, r.w1, r.r1, ctx), ctx)
    return secure_linear(h, r.w2, r.r2, ctx)


def run_inference(session: InferenceSession, e: SharedTensor) -> SharedTensor:
    ctx, net, r = session.ctx, session.net, session.router
    net.snapshot_stats("io")
    t0 = time.perf_counter()

    logits = secure_router_logits(e, r, ctx)
    net.snapshot_stats("router")

    sel = secure_argmax(logits, ctx)
    net.snapshot_stats("argmax")

    if session.mode == "oblivious":
        params = oblivious_select(sel, session.pool.matrix, ctx)
        arch, index = session.pool.env, None
    else:
        onehot = open_shares(sel.share, ctx)
        if int(onehot.sum()) != 1 or not np.all(onehot <= 1):
            raise ProtocolError("opened selection is not one-hot")
        index = int(np.argmax(onehot))
        params = session.pool.expert_params(index)
        arch = session.pool.experts[index]
    net.snapshot_stats("retrieval")

    y = secure_expert_forward(e.reshape(-1), params, arch, ctx)
    net.snapshot_stats("expert")
    session.log.append({"index": index, "seconds": time.perf_counter() - t0})
    return y


def serve(session: InferenceSession, client: Endpoint) -> int:
    """Answer client queries until it sends CLOSE; returns the query count."""
    session.handshake()
    n = 0
    while True:
        msg = client.recv()
        if msg.tag == Tag.CLOSE:
            return n
        if msg.tag != Tag.INPUT:
            raise ProtocolError(f"unexpected client message tag {msg.tag}")
        (arr, scale), = client.tensors_from(msg)
        e = SharedTensor(session.party, arr, scale)
        y = run_inference(session, e)
        client.send_tensors(Tag.OUTPUT, [y.data], [y.scale])
        n += 1


def client_query(links, e, rng, codec: FixedPointCodec = DEFAULT_CODEC) -> ClientResult:
    t0 = time.perf_counter()
    shares = client_prepare(e, rng, codec)
    for link, s in zip(links, shares):
        link.send_tensors(Tag.INPUT, [s.data], [s.scale])
    ys = []
    for p, link in enumerate(links):
        (arr, scale), = link.recv_tensors(Tag.OUTPUT)
        ys.append(SharedTensor(p, arr, scale))
    return client_finish(ys[0], ys[1], codec, time.perf_counter() - t0)


def serve_collocated(session: InferenceSession, link, inputs, rng, codec: FixedPointCodec = DEFAULT_CODEC) -> list:
    """Party 0 doubling as the client: it holds share 0 of each input itself.

    Weaker than the three-role deployment because party 0 sees the plaintext
    input and output; provided for two-machine setups.
    """
    if session.party != 0:
        raise ValueError("only party 0 can act as the client")
    session.handshake()
    out = []
    for e in inputs:
        t0 = time.perf_counter()
        s0, s1 = client_prepare(e, rng, codec)
        link.send_tensors(Tag.INPUT, [s1.data], [s1.scale])
        y0 = run_inference(session, s0)
        (arr, scale), = link.recv_tensors(Tag.OUTPUT)
        out.append(client_finish(y0, SharedTensor(1, arr, scale), codec, time.perf_counter() - t0))
    link.send(Message(Tag.CLOSE))
    return out


def client_close(links) -> None:
    for link in links:
        link.send(Message(Tag.CLOSE))


# ---------------------------------------------------------------- oracle


def _plain_linear(x, w, b, f):
    acc = x.astype(np.int64) @ w.astype(np.int64)
    return truncate_plain(acc.view(np.uint64), f).view(np.int64) + b


def plaintext_pipeline(e, router: RouterPolicy, pool: ModelPool, codec: FixedPointCodec = DEFAULT_CODEC):
    """Fixed-point reference for the routed pipeline, with exact truncation.

    Returns ``(logits, selected_index)``.  Arithmetic is signed int64 on
    encoded values, sharing nothing with the secret-shared code path.
    """
    f = codec.frac_bits
    sig = lambda t: np.asarray(t, dtype=np.uint64).view(np.int64)
    x = sig(codec.encode(e))
    s = x.sum(axis=0)
    if router.seq_len > 1:
        s = sig(truncate_plain((s * sig(codec.encode(1.0 / router.seq_len))).view(np.uint64), f))
    h = np.maximum(_plain_linear(s[None, :], sig(router.w1), sig(router.r1), f), 0)
    z = _plain_linear(h, sig(router.w2), sig(router.r2), f)[0]
    idx = int(np.argmax(z))
    hcur = x.reshape(1, -1)
    blob = [sig(t) for t in pool.blobs[idx]]
    for li in range(0, len(blob), 2):
        hcur = _plain_linear(hcur, blob[li], blob[li + 1], f)
        if li + 2 < len(blob):
            hcur = np.maximum(hcur, 0)
    return hcur[0].astype(np.float64) / (1 << f), idx


# ---------------------------------------------------------------- budgets


def _relu_cost(n: int, bits: int) -> tuple[int, int]:
    return 2 * n, 2 * (bits - 1) * n


def triple_budget(router_dims: tuple, experts, mode: str, bits: int = 64) -> tuple[int, int]:
    """Worst-case ``(arith, bool)`` triples for one routed inference."""
    d, h, k = router_dims
    ar = d * h + h * k
    ra, rb = _relu_cost(h, bits)
    ar, bo = ar + ra, rb
    # argmax: per step one drelu (B2A multiply), k one-hot updates and one max update
    ar += (k - 1) * (1 + k + 1)
    bo += (k - 1) * 2 * (bits - 1)
    def expert_cost(spec):
        w = spec.widths
        a = sum(w[i] * w[i + 1] for i in range(len(w) - 1))
        ea, eb = _relu_cost(sum(w[1:-1]), bits)
        return a + ea, eb
    if mode == "oblivious":
        env = envelope(experts)
        ar += k * env.param_count
        ea, eb = expert_cost(env)
    else:
        costs = [expert_cost(s) for s in experts]
        ea, eb = max(c[0] for c in costs), max(c[1] for c in costs)
    return ar + ea, bo + eb


# ---------------------------------------------------------------- drivers


@dataclass
class SimulationResult:
    results: list
    party_stats: list  # CommStats of the two peer endpoints
    client_stats: list  # CommStats of the client's two links
    transcripts: list  # sha256 of each party's peer-link transcript
    triples_used: list  # (arith, bool) per party
    logs: list  # per-party per-inference logs
    endpoints: list = field(default_factory=list, repr=False)

    def report(self) -> dict:
        """Deterministic summary (no wall-clock fields)."""
        return {
            "labels": [r.label for r in self.results],
            "logits": [[round(float(v), 8) for v in r.logits] for r in self.results],
            "selections": [entry["index"] for entry in self.logs[0]],
            "party_stats": [s.as_dict() for s in self.party_stats],
            "client_stats": [s.as_dict() for s in self.client_stats],
            "transcripts": self.transcripts,
            "triples_used": [list(t) for t in self.triples_used],
        }


def _spawn(seed: int, n: int):
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


def run_threads(targets) -> list:
    """Run callables concurrently; re-raise the first failure after all stop."""
    results = [None] * len(targets)
    errors = []

    def wrap(i, fn, on_error):
        try:
            results[i] = fn()
        except BaseException as exc:  # noqa: BLE001 - propagated below
            errors.append(exc)
            for cb in on_error:
                cb()

    threads = [threading.Thread(target=wrap, args=(i, fn, cbs), daemon=True)
               for i, (fn, cbs) in enumerate(targets)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if errors:
        raise errors[0]
    return results


def simulate(router: RouterPolicy, pool: ModelPool, inputs, seed: int, mode: str = "revealed",
             backend: str = "inprocess", codec: FixedPointCodec = DEFAULT_CODEC,
             record: bool = False, collocated: bool = False) -> SimulationResult:
    """Client, party 0 and party 1 as three concurrent workers in one process.

    With ``collocated`` the client role runs inside party 0 (two workers).
    """
    r_dealer, r_pool, r_router, r_client = _spawn(seed, 4)
    pool_sh = secret_share_pool(pool, r_pool)
    router_sh = secret_share_router(router, r_router)
    dealer = StreamingDealer(int(r_dealer.integers(0, 2**63)))
    if backend == "inprocess":
        peer = inprocess_pair(record)
    elif backend == "socket":
        peer = socket_pair(record)
    else:
        raise ValueError(f"unknown backend {backend!r}")
    client_links = [inprocess_pair(record) for _ in range(2)]  # (client side, party side)
    sessions = [
        InferenceSession(PartyContext(p, peer[p], dealer.store(p), codec), pool_sh[p], router_sh[p], mode)
        for p in (0, 1)
    ]
    everything = [peer[0], peer[1]] + [e for pair in client_links for e in pair]
    close_all = [lambda: [e.close() for e in everything]]

    def client():
        links = [client_links[0][0], client_links[1][0]]
        out = [client_query(links, e, r_client, codec) for e in inputs]
        client_close(links)
        return out

    if collocated:
        res = run_threads([
            (lambda: serve_collocated(sessions[0], client_links[1][0], inputs, r_client, codec), close_all),
            (lambda: serve(sessions[1], client_links[1][1]), close_all),
        ])
    else:
        res = run_threads([
            (client, close_all),
            (lambda: serve(sessions[0], client_links[0][1]), close_all),
            (lambda: serve(sessions[1], client_links[1][1]), close_all),
        ])
    for e in (peer[0], peer[1]):
        e.close()
    return SimulationResult(
        results=res[0],
        party_stats=[peer[0].stats, peer[1].stats],
        client_stats=[client_links[0][0].stats, client_links[1][0].stats],
        transcripts=[peer[0].transcript_hash(), peer[1].transcript_hash()],
        triples_used=[(s.ctx.triples.arith_used, s.ctx.triples.bool_used) for s in sessions],
        logs=[s.log for s in sessions],
        endpoints=list(peer),
    )


def run_pair(fn, seed: int, codec: FixedPointCodec = DEFAULT_CODEC, backend: str = "inprocess",
             record: bool = False):
    """Run ``fn(ctx)`` on both parties over a fresh link; returns ``(outputs, endpoints)``."""
    peer = inprocess_pair(record) if backend == "inprocess" else socket_pair(record)
    dealer = StreamingDealer(seed)
    ctxs = [PartyContext(p, peer[p], dealer.store(p), codec) for p in (0, 1)]
    closer = [lambda: [e.close() for e in peer]]
    out = run_threads([(lambda c=c: fn(c), closer) for c in ctxs])
    return out, list(peer)
