"""Cost accounting, the routed speed-up formula and experiment harnesses."""
from __future__ import annotations

import csv
import io
import statistics
import time
import tracemalloc
from dataclasses import asdict, dataclass

import numpy as np

from .modelpool import ExpertSpec, ModelPool, RouterPolicy, secret_share_router
from .protocol import plaintext_pipeline, run_pair, secure_router_logits, simulate
from .ring import DEFAULT_CODEC, FixedPointCodec
from .secure_ops import secure_argmax, secure_expert_forward
from .sharing import share
from . import trainer as T

COST_PROFILES = (
    ("Baseline", (2.0, 7.0, 13.0)),
    ("Scale x0.7", (1.4, 4.9, 9.1)),
    ("Scale x1.5", (3.0, 10.5, 19.5)),
    ("Flat", (5.1, 7.3, 9.5)),
    ("Steep", (1.0, 7.0, 19.5)),
    ("Reversed", (13.0, 7.0, 2.0)),
)

POOL_LADDERS = {
    2: (("tiny", 2.0), ("large", 13.0)),
    3: (("tiny", 2.0), ("base", 7.0), ("large", 13.0)),
    4: (("tiny", 2.0), ("small", 4.0), ("base", 7.0), ("large", 13.0)),
    5: (("tiny", 2.0), ("mini", 3.0), ("small", 4.0), ("base", 7.0), ("large", 13.0)),
}


# ---------------------------------------------------------------- formula


def _check_latencies(*values) -> None:
    for v in values:
        if np.any(np.asarray(v, dtype=np.float64) <= 0):
            raise ValueError("latencies must be positive")


def speedup(n: int, c_baseline: float, selections, latencies, c_router: float) -> float:
    """``N * C_baseline / sum_i (C[selection_i] + C_router)``."""
    sel = np.asarray(selections, dtype=np.int64)
    if sel.size == 0 or n <= 0:
        raise ValueError("no selections")
    if sel.size != n:
        raise ValueError(f"{sel.size} selections for N={n}")
    lat = np.asarray(latencies, dtype=np.float64)
    _check_latencies(c_baseline, lat)
    if c_router < 0:
        raise ValueError("router latency must be non-negative")
    return float(n * c_baseline / np.sum(lat[sel] + c_router))


def routed_cost(distribution, latencies, c_router: float) -> float:
    """Expected per-sample cost of the routed pipeline."""
    dist = _check_distribution(distribution)
    lat = np.asarray(latencies, dtype=np.float64)
    if dist.size != lat.size:
        raise ValueError(f"{dist.size} fractions for {lat.size} latencies")
    _check_latencies(lat)
    return float(dist @ lat + c_router)


def speedup_from_distribution(distribution, latencies, c_router: float, c_baseline: float) -> float:
    """Speed-up in the limit of many samples with the given selection fractions."""
    _check_latencies(c_baseline)
    return float(c_baseline / routed_cost(distribution, latencies, c_router))


def _check_distribution(distribution) -> np.ndarray:
    dist = np.asarray(distribution, dtype=np.float64)
    if np.any(dist < 0) or abs(dist.sum() - 1.0) > 1e-9:
        raise ValueError(f"selection fractions must be >= 0 and sum to 1, got {dist.tolist()}")
    return dist


# ---------------------------------------------------------------- measurement


@dataclass
class ProfileReport:
    names: list
    unit_latency: list  # seconds per expert, median of calibration runs
    router_latency: float
    expert_bytes: list  # bytes on the party-to-party link per expert inference
    router_bytes: int
    distribution: list
    n: int
    speedup: float
    memory_peak: int  # bytes, traced allocation high-water mark (approximate)
    mode: str = "revealed"
    routed_bytes_per_sample: float = 0.0
    always_large_bytes_per_sample: float = 0.0
    routed_seconds_per_sample: float = 0.0

    def __post_init__(self):
        _check_distribution(self.distribution)

    @property
    def baseline_index(self) -> int:
        return int(np.argmax(self.unit_latency))

    def as_dict(self) -> dict:
        return asdict(self)

    def rows(self) -> list:
        out = [{"component": "router", "latency_s": self.router_latency,
                "bytes": self.router_bytes, "route_fraction": ""}]
        for name, lat, b, d in zip(self.names, self.unit_latency, self.expert_bytes, self.distribution):
            out.append({"component": name, "latency_s": lat, "bytes": b, "route_fraction": d})
        return out

    def write_csv(self, path) -> None:
        write_rows(self.rows(), path)

    def render(self) -> str:
        lines = [f"{'component':<12}{'latency_s':>12}{'bytes':>14}{'route%':>9}"]
        for r in self.rows():
            frac = "" if r["route_fraction"] == "" else f"{100 * r['route_fraction']:.1f}"
            lines.append(f"{r['component']:<12}{r['latency_s']:>12.4f}{r['bytes']:>14d}{frac:>9}")
        lines.append(f"samples={self.n} mode={self.mode} speed-up={self.speedup:.3f} "
                     f"memory_peak={self.memory_peak / 2**20:.1f}MiB")
        lines.append(f"bytes/sample routed={self.routed_bytes_per_sample:.0f} "
                     f"always-largest={self.always_large_bytes_per_sample:.0f}")
        return "\n".join(lines)


def _link_bytes(endpoints) -> int:
    return int(sum(ep.stats.bytes_sent for ep in endpoints))


def _calibrate(fn, seed: int, runs: int, codec) -> tuple[float, int]:
    times, volume = [], None
    for r in range(runs):
        t0 = time.perf_counter()
        _, eps = run_pair(fn, seed + r, codec)
        times.append(time.perf_counter() - t0)
        volume = _link_bytes(eps)
    return statistics.median(times), volume


def calibrate_expert(pool: ModelPool, i: int, seq_len: int, seed: int = 0, runs: int = 5,
                     codec: FixedPointCodec = DEFAULT_CODEC) -> tuple[float, int]:
    """Median seconds and link bytes of one secure forward of expert ``i``."""
    rng = np.random.default_rng(seed)
    spec = pool.experts[i]
    x = rng.normal(0.0, 1.0, spec.widths[0])
    xs = share(codec.encode(x), rng, codec.frac_bits)
    ps = share(pool.flat(i), rng, pool.frac_bits)
    return _calibrate(lambda ctx: secure_expert_forward(xs[ctx.party], ps[ctx.party], spec, ctx),
                      seed, runs, codec)


def calibrate_router(router: RouterPolicy, seed: int = 0, runs: int = 5,
                     codec: FixedPointCodec = DEFAULT_CODEC) -> tuple[float, int]:
    """Median seconds and link bytes of the secure router plus argmax."""
    rng = np.random.default_rng(seed)
    e = rng.normal(0.0, 1.0, (router.seq_len, router.d_s))
    es = share(codec.encode(e), rng, codec.frac_bits)
    rs = secret_share_router(router, rng)
    return _calibrate(lambda ctx: secure_argmax(secure_router_logits(es[ctx.party], rs[ctx.party], ctx), ctx),
                      seed, runs, codec)


def forced_router(router: RouterPolicy, index: int, codec: FixedPointCodec = DEFAULT_CODEC) -> RouterPolicy:
    """Same shapes as ``router`` but always selects ``index``."""
    r2 = np.zeros_like(router.r2)
    r2[index] = codec.encode(1.0)
    return RouterPolicy(router.w1, router.r1, np.zeros_like(router.w2), r2, router.seq_len, router.frac_bits)


def _pipeline_bytes_per_sample(sim, n: int) -> float:
    total = sum(s.bytes_sent for s in sim.party_stats)
    handshake = sum(s.phases["io"].bytes_sent for s in sim.party_stats if "io" in s.phases)
    return (total - handshake) / n


def profile_pipeline(pool: ModelPool, router: RouterPolicy, samples, mode: str = "revealed",
                     seed: int = 0, runs: int = 5, codec: FixedPointCodec = DEFAULT_CODEC) -> ProfileReport:
    """Calibrate each expert and the router, then run the routed pipeline over ``samples``.

    Selections come from the servers' logs in revealed mode; in oblivious mode
    the servers never learn them, so the plaintext fixed-point oracle supplies
    the distribution.
    """
    samples = np.asarray(samples, dtype=np.float64)
    if len(samples) == 0:
        raise ValueError("no samples to profile")
    lat, vol = [], []
    for i in range(pool.k):
        t, b = calibrate_expert(pool, i, router.seq_len, seed, runs, codec)
        lat.append(t)
        vol.append(b)
    r_lat, r_bytes = calibrate_router(router, seed, runs, codec)

    tracing = tracemalloc.is_tracing()
    if not tracing:
        tracemalloc.start()
    tracemalloc.reset_peak()
    t0 = time.perf_counter()
    sim = simulate(router, pool, samples, seed, mode, codec=codec)
    elapsed = time.perf_counter() - t0
    peak = tracemalloc.get_traced_memory()[1]
    if not tracing:
        tracemalloc.stop()

    if mode == "revealed":
        sel = np.array([entry["index"] for entry in sim.logs[0]], dtype=np.int64)
    else:
        sel = np.array([plaintext_pipeline(e, router, pool, codec)[1] for e in samples], dtype=np.int64)
    dist = np.bincount(sel, minlength=pool.k) / len(sel)
    large = int(np.argmax([s.param_count for s in pool.experts]))
    forced = simulate(forced_router(router, large, codec), pool, samples, seed, mode, codec=codec)
    return ProfileReport(
        names=[s.name for s in pool.experts],
        unit_latency=lat,
        router_latency=r_lat,
        expert_bytes=vol,
        router_bytes=r_bytes,
        distribution=dist.tolist(),
        n=len(samples),
        speedup=speedup(len(sel), lat[large], sel, lat, r_lat),
        memory_peak=int(peak),
        mode=mode,
        routed_bytes_per_sample=_pipeline_bytes_per_sample(sim, len(samples)),
        always_large_bytes_per_sample=_pipeline_bytes_per_sample(forced, len(samples)),
        routed_seconds_per_sample=elapsed / len(samples),
    )


# ---------------------------------------------------------------- experiments


@dataclass
class ExperimentData:
    train: T.Dataset
    test: T.Dataset
    classes: int = 8

    @classmethod
    def synthetic(cls, seed: int, n_train: int = 8000, n_test: int = 3000, classes: int = 8) -> "ExperimentData":
        tr, te = np.random.SeedSequence(seed).spawn(2)
        return cls(T.make_dataset(n_train, np.random.default_rng(tr), classes=classes),
                   T.make_dataset(n_test, np.random.default_rng(te), classes=classes), classes)

    @property
    def input_dim(self) -> int:
        return int(np.prod(self.train.emb.shape[1:]))


def _train_eval(data: ExperimentData, ladder, cfg: T.TrainConfig) -> tuple:
    specs = [ExpertSpec(name, (data.input_dim, *T.WIDTHS[name], data.classes), float(c))
             for name, c in ladder]
    res = T.train(data.train, specs, cfg)
    return res, T.evaluate(res.model, data.test, [s.cost for s in specs])


def experiment_scalability(cfg: T.TrainConfig, ks=(2, 3, 4, 5), data: ExperimentData | None = None,
                           measure: bool = True, runs: int = 3) -> list:
    """One row per pool size K: experts, costs, accuracy, F1, speed-up.

    With ``measure`` the speed-up uses calibrated MPC latencies of the trained
    experts and router; otherwise the configured cost units stand in for
    latencies with no router overhead.
    """
    data = data or ExperimentData.synthetic(cfg.seed)
    rows = []
    for k in ks:
        if k not in POOL_LADDERS:
            raise ValueError(f"no pool ladder for K={k}")
        ladder = POOL_LADDERS[k]
        res, ev = _train_eval(data, ladder, cfg)
        costs = [c for _, c in ladder]
        if measure:
            lat = [calibrate_expert(res.pool, i, res.router.seq_len, cfg.seed, runs)[0] for i in range(k)]
            c_router = calibrate_router(res.router, cfg.seed, runs)[0]
        else:
            lat, c_router = costs, 0.0
        rows.append({
            "K": k,
            "experts": "+".join(n for n, _ in ladder),
            "costs": " ".join(f"{c:g}" for c in costs),
            "accuracy": ev["accuracy"],
            "f1": ev["f1"],
            "speedup": speedup_from_distribution(ev["shares"], lat, c_router, lat[-1]),
            "route_pct": " ".join(f"{100 * s:.1f}" for s in ev["shares"]),
        })
    return rows


def experiment_cost_sensitivity(cfg: T.TrainConfig, profiles=COST_PROFILES,
                                data: ExperimentData | None = None) -> list:
    """Retrain the three-expert pool under each cost profile with the same seeds."""
    data = data or ExperimentData.synthetic(cfg.seed)
    names = [n for n, _ in POOL_LADDERS[3]]
    rows = []
    for label, costs in profiles:
        if len(costs) != len(names):
            raise ValueError(f"profile {label} has {len(costs)} costs, pool has {len(names)} experts")
        _, ev = _train_eval(data, list(zip(names, costs)), cfg)
        row = {"profile": label, "costs": " ".join(f"{c:g}" for c in costs),
               "f1": ev["f1"], "accuracy": ev["accuracy"], "expected_cost": ev["expected_cost"]}
        for n, s in zip(names, ev["shares"]):
            row[f"{n}_route_pct"] = 100.0 * float(s)
        rows.append(row)
    return rows


def write_rows(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(rows_to_csv(rows))


def rows_to_csv(rows) -> str:
    if not rows:
        return ""
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()


def render_rows(rows) -> str:
    if not rows:
        return ""
    cols = list(rows[0])

    def fmt(v):
        return f"{v:.4f}" if isinstance(v, float) else str(v)

    cells = [[fmt(r[c]) for c in cols] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) for i, c in enumerate(cols)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(cols, widths))]
    lines += ["  ".join(v.ljust(w) for v, w in zip(row, widths)) for row in cells]
    return "\n".join(lines)
