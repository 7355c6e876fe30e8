import numpy as np
import pytest

from conftest import random_pool, random_router
from mpcroute.errors import HandshakeError, ProtocolError, TripleExhaustedError
from mpcroute.modelpool import ExpertSpec, ModelPool, RouterPolicy, secret_share_pool, secret_share_router
from mpcroute.protocol import (
    InferenceSession,
    client_close,
    client_finish,
    client_prepare,
    client_query,
    plaintext_pipeline,
    run_threads,
    serve,
    simulate,
    triple_budget,
)
from mpcroute.ring import DEFAULT_CODEC as C
from mpcroute.secure_ops import PartyContext
from mpcroute.sharing import SharedTensor, TripleStore, dealer_generate, reconstruct, share
from mpcroute.transport import inprocess_pair

ULP = 2.0**-16


# ---------------------------------------------------------------- client side


def test_client_prepare_round_trip(rng):
    e = rng.normal(0, 2, (4, 3))
    s0, s1 = client_prepare(e, rng)
    assert np.abs(C.decode(reconstruct(s0, s1)) - e).max() <= 2.0**-17
    z0, z1 = client_prepare(np.zeros((2, 2)), rng)
    assert not reconstruct(z0, z1).any()


def test_client_prepare_seed_independence(rng):
    e = rng.normal(size=(3, 3))
    a = client_prepare(e, np.random.default_rng(1))
    b = client_prepare(e, np.random.default_rng(2))
    assert not np.array_equal(a[0].data, b[0].data)
    assert np.array_equal(reconstruct(*a), reconstruct(*b))


def test_client_finish_examples(rng):
    res = client_finish(*share(C.encode([0.1, 0.9]), rng, 16))
    assert res.label == 1
    tie = client_finish(*share(C.encode([0.5, 0.5, -1.0]), rng, 16))
    assert tie.label == 0
    assert np.allclose(tie.logits, [0.5, 0.5, -1.0])
    with pytest.raises(ProtocolError):
        client_finish(SharedTensor(0, np.zeros(2, np.uint64), 16), SharedTensor(1, np.zeros(3, np.uint64), 16))


# ---------------------------------------------------------------- end to end


@pytest.mark.parametrize("mode", ["revealed", "oblivious"])
def test_simulate_matches_plaintext_oracle(small_setup, mode):
    router, pool, inputs = small_setup
    sim = simulate(router, pool, inputs, seed=11, mode=mode)
    for e, res in zip(inputs, sim.results):
        logits, idx = plaintext_pipeline(e, router, pool)
        assert np.abs(res.logits - logits).max() <= 4 * ULP
        assert res.label == int(np.argmax(res.logits))
    if mode == "revealed":
        want = [plaintext_pipeline(e, router, pool)[1] for e in inputs]
        assert [entry["index"] for entry in sim.logs[0]] == want
    else:
        assert all(entry["index"] is None for entry in sim.logs[0] + sim.logs[1])


def test_degenerate_zero_expert_returns_its_bias(rng):
    seq, d, classes = 2, 3, 3
    bias = np.array([0.75, -0.5, 2.0])
    specs = [ExpertSpec("zero", (seq * d, 4, classes)), ExpertSpec("other", (seq * d, 8, classes), 2.0)]
    w0 = [np.zeros((6, 4)), np.zeros(4), np.zeros((4, classes)), bias]
    w1 = [rng.normal(size=s) for layer in specs[1].layout() for _, s in layer]
    pool = ModelPool.from_weights(specs, [w0, w1], C)
    router = RouterPolicy.from_weights([rng.normal(size=(d, 4)), np.zeros(4), np.zeros((4, 2)),
                                        np.array([5.0, 0.0])], seq, C)
    inputs = rng.normal(size=(3, seq, d))
    for mode in ("revealed", "oblivious"):
        sim = simulate(router, pool, inputs, seed=2, mode=mode)
        for res in sim.results:
            assert np.array_equal(res.logits, C.decode(C.encode(bias)))


def test_modes_agree_on_homogeneous_pool(rng):
    pool = random_pool(rng, [(8, 6, 3)] * 3)
    router = random_router(rng, 4, 5, 3, seq_len=2)
    inputs = rng.normal(size=(5, 2, 4))
    rev = simulate(router, pool, inputs, seed=4, mode="revealed")
    obl = simulate(router, pool, inputs, seed=4, mode="oblivious")
    for a, b in zip(rev.results, obl.results):
        # local truncation of different share pairs may differ by one unit per layer
        assert np.abs(a.logits - b.logits).max() <= 2 * ULP
        assert a.label == b.label


def test_tied_router_logits_pick_lowest_index(rng):
    pool = random_pool(rng, [(4, 3, 2)] * 3)
    router = RouterPolicy.from_weights([np.zeros((2, 3)), np.zeros(3), np.zeros((3, 3)), np.ones(3)], 2, C)
    sim = simulate(router, pool, rng.normal(size=(2, 2, 2)), seed=1)
    assert [e["index"] for e in sim.logs[0]] == [0, 0]


def test_transcripts_deterministic_across_backends(small_setup):
    router, pool, inputs = small_setup
    runs = [simulate(router, pool, inputs[:2], seed=9, backend=b, record=True)
            for b in ("inprocess", "inprocess", "socket")]
    reports = [r.report() for r in runs]
    assert reports[0] == reports[1] == reports[2]
    st = runs[0].party_stats
    assert st[0].bytes_sent == st[1].bytes_received and st[1].bytes_sent == st[0].bytes_received
    other = simulate(router, pool, inputs[:2], seed=10, record=True)
    assert other.transcripts != runs[0].transcripts


def test_phase_stats_are_additive(small_setup):
    router, pool, inputs = small_setup
    sim = simulate(router, pool, inputs[:3], seed=5, mode="oblivious")
    for st in sim.party_stats:
        assert set(st.phases) == {"io", "router", "argmax", "retrieval", "expert"}
        for field in ("bytes_sent", "bytes_received", "rounds"):
            assert sum(getattr(c, field) for c in st.phases.values()) == getattr(st, field)
        assert st.phases["expert"].bytes_sent > 0 and st.phases["argmax"].rounds > 0


def test_collocated_mode_matches_three_role_run(small_setup):
    router, pool, inputs = small_setup
    three = simulate(router, pool, inputs, seed=6)
    two = simulate(router, pool, inputs, seed=6, collocated=True)
    assert [r.label for r in two.results] == [r.label for r in three.results]
    for a, b in zip(two.results, three.results):
        assert np.abs(a.logits - b.logits).max() <= 4 * ULP


# ---------------------------------------------------------------- sessions with fixed triples


def _sessions(router, pool, mode_pair, stores, rng):
    peer = inprocess_pair()
    ps = secret_share_pool(pool, rng)
    rs = secret_share_router(router, rng)
    sess = [InferenceSession(PartyContext(p, peer[p], stores[p], C), ps[p], rs[p], mode_pair[p])
            for p in (0, 1)]
    return peer, sess


def _serve_inputs(peer, sess, inputs, rng):
    links = [inprocess_pair() for _ in range(2)]
    everything = list(peer) + [e for pair in links for e in pair]
    close = [lambda: [e.close() for e in everything]]

    def client():
        ends = [links[0][0], links[1][0]]
        out = [client_query(ends, e, rng) for e in inputs]
        client_close(ends)
        return out

    return run_threads([(client, close),
                        (lambda: serve(sess[0], links[0][1]), close),
                        (lambda: serve(sess[1], links[1][1]), close)])[0]


def _fixed_stores(n_arith, n_bool, seed=0):
    h0, h1 = dealer_generate(n_arith, n_bool, np.random.default_rng(seed))
    return TripleStore(h0), TripleStore(h1)


def test_handshake_mode_mismatch(small_setup, rng):
    router, pool, inputs = small_setup
    stores = _fixed_stores(10, 10)
    peer, sess = _sessions(router, pool, ("revealed", "oblivious"), stores, rng)
    with pytest.raises(HandshakeError, match="mode"):
        _serve_inputs(peer, sess, inputs[:1], rng)


def test_handshake_pool_mismatch(small_setup, rng):
    router, pool, inputs = small_setup
    other = random_pool(rng, [(12, 5, 2), (12, 8, 2), (12, 16, 2)])
    peer = inprocess_pair()
    ps_a, ps_b = secret_share_pool(pool, rng), secret_share_pool(other, rng)
    rs = secret_share_router(router, rng)
    stores = _fixed_stores(10, 10)
    sess = [InferenceSession(PartyContext(0, peer[0], stores[0], C), ps_a[0], rs[0]),
            InferenceSession(PartyContext(1, peer[1], stores[1], C), ps_b[1], rs[1])]
    with pytest.raises(HandshakeError, match="pool hash"):
        _serve_inputs(peer, sess, inputs[:1], rng)


@pytest.mark.parametrize("mode", ["revealed", "oblivious"])
def test_triple_budget_is_sufficient_and_tight(small_setup, rng, mode):
    router, pool, inputs = small_setup
    dims = (router.d_s, router.hidden, router.k)
    na, nb = triple_budget(dims, pool.experts, mode)
    n = 3
    peer, sess = _sessions(router, pool, (mode, mode), _fixed_stores(n * na, n * nb), rng)
    res = _serve_inputs(peer, sess, inputs[:n], rng)
    assert len(res) == n
    used = sess[0].ctx.triples.arith_used, sess[0].ctx.triples.bool_used
    assert used[0] <= n * na and used[1] <= n * nb
    if mode == "oblivious":
        # the envelope always runs, so the budget is exact
        assert used == (n * na, n * nb)


def test_triple_exhaustion_is_reported(small_setup, rng):
    router, pool, inputs = small_setup
    na, nb = triple_budget((router.d_s, router.hidden, router.k), pool.experts, "oblivious")
    peer, sess = _sessions(router, pool, ("oblivious",) * 2, _fixed_stores(na - 1, nb), rng)
    with pytest.raises(TripleExhaustedError):
        _serve_inputs(peer, sess, inputs[:1], rng)
