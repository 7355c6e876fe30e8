"""Command line entry point: ``mpcroute <command> --seed N ...``.

Exit status is 0 on success, 1 for usage errors and 2 for runtime failures.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import profiler, protocol
from . import trainer as T
from .errors import CorruptFileError, MPCConnectionError, ProtocolError, RangeError, TrainingError
from .modelpool import (
    load_pool,
    load_pool_shares,
    load_router,
    load_router_shares,
    save_pool,
    save_pool_shares,
    save_router,
    save_router_shares,
    secret_share_pool,
    secret_share_router,
)
from .ring import DEFAULT_CODEC
from .secure_ops import PartyContext
from .sharing import StreamingDealer, TripleStore, dealer_generate, load_triples, save_triples
from .transport import accept_endpoint, connect_endpoint

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
RUNTIME_ERRORS = (OSError, ValueError, ProtocolError, MPCConnectionError, TrainingError,
                  CorruptFileError, RangeError, KeyError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, required=True, help="root of all randomness")


def _mode(p: argparse.ArgumentParser) -> None:
    p.add_argument("--mode", choices=protocol.MODES, default="revealed")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="mpcroute", description="Secret-shared cost-aware routing over an MPC model pool.")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("dealer", help="generate correlated randomness for both parties")
    _common(p)
    p.add_argument("--arith", type=int, help="arithmetic triples per party")
    p.add_argument("--bool", type=int, help="boolean triples per party")
    p.add_argument("--pool", help="pool manifest; with --router and --queries sizes the budget")
    p.add_argument("--router", help="router manifest")
    p.add_argument("--queries", type=int, default=1)
    _mode(p)
    p.add_argument("--out", default=".", help="directory for triples-0.bin / triples-1.bin")

    p = sub.add_parser("train", help="train router and pool on synthetic data")
    _common(p)
    p.add_argument("--config", help="TrainConfig JSON")
    p.add_argument("--costs", help="comma-separated cost units for tiny,base,large")
    p.add_argument("--samples", type=int, default=8000)
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("share-pool", help="secret-share a trained pool and router")
    _common(p)
    p.add_argument("--pool", required=True)
    p.add_argument("--router", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("party", help="run one compute party")
    _common(p)
    p.add_argument("--id", type=int, choices=(0, 1), required=True)
    p.add_argument("--pool", required=True, help="this party's pool-share manifest")
    p.add_argument("--router", required=True, help="this party's router-share manifest")
    p.add_argument("--triples", help="this party's triple file (default: seed-derived stream)")
    p.add_argument("--peer", required=True, help="host:port of the party link (party 0 listens)")
    p.add_argument("--listen", help="host:port to accept the client on")
    p.add_argument("--connect", help="party 0 doubling as client: party 1's client address")
    p.add_argument("--inputs", help="party 0 doubling as client: embeddings .npy [n, seq, d]")
    p.add_argument("--report", help="directory for outputs")
    p.add_argument("--timeout", type=float, default=30.0)
    _mode(p)

    p = sub.add_parser("client", help="share inputs with both parties and reconstruct results")
    _common(p)
    p.add_argument("--connect", action="append", required=True,
                   help="host:port of party 0, then of party 1")
    p.add_argument("--inputs", required=True, help="embeddings .npy [n, seq, d]")
    p.add_argument("--report", help="directory for outputs")
    p.add_argument("--timeout", type=float, default=30.0)

    p = sub.add_parser("simulate", help="client and both parties in one process")
    _common(p)
    p.add_argument("--pool", help="plaintext pool manifest (default: built-in demo pool)")
    p.add_argument("--router", help="plaintext router manifest")
    p.add_argument("--inputs", help="embeddings .npy [n, seq, d] (default: synthetic)")
    p.add_argument("--samples", type=int, default=4)
    p.add_argument("--backend", choices=("inprocess", "socket"), default="inprocess")
    p.add_argument("--collocated", action="store_true", help="client role runs inside party 0")
    p.add_argument("--runs", type=int, default=3, help="calibration runs for the profile")
    p.add_argument("--no-profile", action="store_true")
    p.add_argument("--report", help="directory for outputs")
    _mode(p)

    p = sub.add_parser("bench", help="profile the routed pipeline")
    _common(p)
    p.add_argument("--pool")
    p.add_argument("--router")
    p.add_argument("--inputs")
    p.add_argument("--samples", type=int, default=20)
    p.add_argument("--runs", type=int, default=5)
    p.add_argument("--report", help="directory for profile.csv / profile.json")
    _mode(p)

    p = sub.add_parser("experiment", help="pool-size and cost-profile sweeps")
    p.add_argument("name", choices=("scalability", "cost-sensitivity"))
    _common(p)
    p.add_argument("--config", help="TrainConfig JSON")
    p.add_argument("--samples", type=int, default=8000)
    p.add_argument("--no-measure", action="store_true", help="use cost units instead of MPC latencies")
    p.add_argument("--report", help="directory for the CSV")
    return ap


# ---------------------------------------------------------------- helpers


def _config(args) -> T.TrainConfig:
    cfg = T.TrainConfig.load(args.config) if getattr(args, "config", None) else T.TrainConfig()
    cfg.seed = args.seed
    return cfg


def _report_dir(args) -> Path | None:
    if not getattr(args, "report", None):
        return None
    d = Path(args.report)
    d.mkdir(parents=True, exist_ok=True)
    return d


def _artifacts(args):
    """Plaintext router and pool from files, or the built-in demo."""
    if bool(args.pool) != bool(args.router):
        raise UsageError("--pool and --router must be given together")
    if args.pool:
        return load_router(args.router), load_pool(args.pool)
    router, pool, _ = T.demo_artifacts(args.seed)
    return router, pool


def _inputs(args, router) -> np.ndarray:
    if args.inputs:
        return np.load(args.inputs)
    rng = np.random.default_rng(np.random.SeedSequence(args.seed).spawn(1)[0])
    data = T.make_dataset(args.samples, rng, d=router.d_s, seq_len=router.seq_len)
    return data.emb


def _print_results(results, out) -> None:
    for i, r in enumerate(results):
        logits = " ".join(f"{v:.5f}" for v in r.logits)
        print(f"sample {i}: label={r.label} logits=[{logits}]", file=out)


# ---------------------------------------------------------------- commands


def cmd_dealer(args, out) -> int:
    if args.pool or args.router:
        if not (args.pool and args.router):
            raise UsageError("--pool and --router must be given together")
        router, pool = load_router(args.router), load_pool(args.pool)
        a, b = protocol.triple_budget((router.d_s, router.hidden, router.k), pool.experts, args.mode)
        n_arith, n_bool = a * args.queries, b * args.queries
    else:
        if args.arith is None or args.bool is None:
            raise UsageError("give --arith and --bool, or --pool and --router")
        n_arith, n_bool = args.arith, args.bool
    if n_arith < 0 or n_bool < 0:
        raise UsageError("triple counts must be non-negative")
    halves = dealer_generate(n_arith, n_bool, np.random.default_rng(args.seed))
    d = Path(args.out)
    d.mkdir(parents=True, exist_ok=True)
    for h in halves:
        save_triples(h, d / f"triples-{h.party}.bin")
    print(f"wrote {n_arith} arithmetic and {n_bool} boolean triples per party to {d}", file=out)
    return EXIT_OK


def cmd_train(args, out) -> int:
    cfg = _config(args)
    costs = [2.0, 7.0, 13.0]
    if args.costs:
        costs = [float(c) for c in args.costs.split(",")]
    rng = np.random.default_rng(np.random.SeedSequence(args.seed).spawn(1)[0])
    data = T.make_dataset(args.samples, rng)
    specs = T.ladder_specs(int(np.prod(data.emb.shape[1:])), int(data.labels.max()) + 1, costs)
    res = T.train(data, specs, cfg)
    d = Path(args.out)
    d.mkdir(parents=True, exist_ok=True)
    save_pool(res.pool, d / "pool.json")
    save_router(res.router, d / "router.json")
    T.write_history(res.history, d / "history.csv")
    (d / "config.json").write_text(cfg.to_json())
    last = res.history[-1]
    print(f"trained {len(specs)} experts; final L_task={last['L_task']:.4f} "
          f"hist={last['hist']} quantization_error={res.pool.quantization_error:.2e}", file=out)
    return EXIT_OK


def cmd_share_pool(args, out) -> int:
    pool, router = load_pool(args.pool), load_router(args.router)
    r_pool, r_router = (np.random.default_rng(s) for s in np.random.SeedSequence(args.seed).spawn(2))
    d = Path(args.out)
    d.mkdir(parents=True, exist_ok=True)
    for ps in secret_share_pool(pool, r_pool):
        save_pool_shares(ps, d / f"pool-shares-{ps.party}.json")
    for rs in secret_share_router(router, r_router):
        save_router_shares(rs, d / f"router-shares-{rs.party}.json")
    print(f"wrote shares for {pool.k} experts to {d}", file=out)
    return EXIT_OK


def _party_store(args) -> TripleStore:
    if args.triples:
        half = load_triples(args.triples)
        if half.party != args.id:
            raise ProtocolError(f"{args.triples} holds party {half.party}'s triples")
        return TripleStore(half)
    return StreamingDealer(args.seed).store(args.id)


def cmd_party(args, out) -> int:
    if (args.inputs is None) != (args.connect is None):
        raise UsageError("--inputs and --connect go together")
    collocated = args.inputs is not None
    if collocated and args.id != 0:
        raise UsageError("only party 0 can double as the client")
    if not collocated and not args.listen:
        raise UsageError("--listen is required unless party 0 doubles as client")
    pool, router = load_pool_shares(args.pool), load_router_shares(args.router)
    if args.id == 0:
        peer = accept_endpoint(args.peer, 0, args.timeout)
    else:
        peer = connect_endpoint(args.peer, 1, args.timeout)
    ctx = PartyContext(args.id, peer, _party_store(args), DEFAULT_CODEC)
    session = protocol.InferenceSession(ctx, pool, router, args.mode)
    try:
        if collocated:
            link = connect_endpoint(args.connect, 0, args.timeout)
            rng = np.random.default_rng(np.random.SeedSequence(args.seed).spawn(2)[1])
            results = protocol.serve_collocated(session, link, np.load(args.inputs), rng)
            link.close()
            _print_results(results, out)
            _write_results(results, args)
        else:
            client = accept_endpoint(args.listen, args.id, args.timeout)
            n = protocol.serve(session, client)
            client.close()
            print(f"party {args.id}: served {n} queries, {peer.stats.total_bytes} link bytes, "
                  f"{peer.stats.rounds} rounds, transcript {peer.transcript_hash()}", file=out)
    finally:
        peer.close()
    return EXIT_OK


def _write_results(results, args) -> None:
    d = _report_dir(args)
    if d is not None:
        payload = [{"label": r.label, "logits": [float(v) for v in r.logits]} for r in results]
        (d / "results.json").write_text(json.dumps(payload, indent=2))


def cmd_client(args, out) -> int:
    if len(args.connect) != 2:
        raise UsageError("--connect must be given twice: party 0 then party 1")
    inputs = np.load(args.inputs)
    links = [connect_endpoint(a, p, args.timeout) for p, a in enumerate(args.connect)]
    rng = np.random.default_rng(np.random.SeedSequence(args.seed).spawn(2)[1])
    try:
        results = [protocol.client_query(links, e, rng) for e in inputs]
        protocol.client_close(links)
    finally:
        for link in links:
            link.close()
    _print_results(results, out)
    _write_results(results, args)
    return EXIT_OK


def cmd_simulate(args, out) -> int:
    router, pool = _artifacts(args)
    inputs = _inputs(args, router)
    sim = protocol.simulate(router, pool, inputs, args.seed, args.mode, backend=args.backend,
                            collocated=args.collocated)
    _print_results(sim.results, out)
    oracle = [protocol.plaintext_pipeline(e, router, pool)[0] for e in inputs]
    agree = sum(int(np.argmax(o)) == r.label for o, r in zip(oracle, sim.results))
    print(f"plaintext oracle agreement: {agree}/{len(inputs)}", file=out)
    print(f"transcripts: {' '.join(sim.transcripts)}", file=out)
    d = _report_dir(args)
    if d is not None:
        (d / "report.json").write_text(json.dumps(sim.report(), indent=2, sort_keys=True))
    if not args.no_profile:
        rep = profiler.profile_pipeline(pool, router, inputs, args.mode, args.seed, args.runs)
        print(rep.render(), file=out)
        if d is not None:
            rep.write_csv(d / "profile.csv")
    return EXIT_OK


def cmd_bench(args, out) -> int:
    router, pool = _artifacts(args)
    inputs = _inputs(args, router)
    rep = profiler.profile_pipeline(pool, router, inputs, args.mode, args.seed, args.runs)
    print(rep.render(), file=out)
    d = _report_dir(args)
    if d is not None:
        rep.write_csv(d / "profile.csv")
        (d / "profile.json").write_text(json.dumps(rep.as_dict(), indent=2))
    return EXIT_OK


def cmd_experiment(args, out) -> int:
    cfg = _config(args)
    data = profiler.ExperimentData.synthetic(args.seed, n_train=args.samples)
    if args.name == "scalability":
        rows = profiler.experiment_scalability(cfg, data=data, measure=not args.no_measure)
    else:
        rows = profiler.experiment_cost_sensitivity(cfg, data=data)
    print(profiler.render_rows(rows), file=out)
    d = _report_dir(args)
    if d is not None:
        profiler.write_rows(rows, d / f"{args.name}.csv")
    return EXIT_OK


COMMANDS = {
    "dealer": cmd_dealer,
    "train": cmd_train,
    "share-pool": cmd_share_pool,
    "party": cmd_party,
    "client": cmd_client,
    "simulate": cmd_simulate,
    "bench": cmd_bench,
    "experiment": cmd_experiment,
}


def main(argv=None, out=None) -> int:
    out = out or sys.stdout
    try:
        args = build_parser().parse_args(argv)
        return COMMANDS[args.command](args, out)
    except SystemExit as exc:  # --help
        return EXIT_OK if not exc.code else EXIT_USAGE
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except RUNTIME_ERRORS as exc:
        print(f"mpcroute: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
