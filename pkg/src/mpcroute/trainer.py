"""Offline joint training of the router and expert pool (plaintext, numpy).

Forward pass per batch::

    summary = mean over the sequence axis of e
    logits  = router(summary)
    g       = gumbel_softmax(logits, tau)
    Y_pred  = sum_i g_i * E_i(e)

Objective: ``L_task + alpha * L_cost + beta * L_balance`` (the weight-to-loss
mapping is configurable).  All gradients are written out by hand; see
``tests/test_trainer.py`` for the finite-difference check.
"""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .errors import TrainingError
from .modelpool import ExpertSpec, ModelPool, RouterPolicy
from .ring import FixedPointCodec

LOSS_MAPPINGS = ("alpha_cost", "alpha_balance")


@dataclass
class TrainConfig:
    alpha: float = 0.05
    beta: float = 0.08
    tau_start: float = 5.0
    tau_end: float = 0.5
    lr: float = 0.1
    batch_size: int = 64
    epochs: int = 20
    warmup_epochs: int = 40
    qat_epochs: int = 1
    router_hidden: int = 16
    seed: int = 0
    loss_mapping: str = "alpha_cost"

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("loss weights must be non-negative")
        if self.tau_start <= 0 or self.tau_end <= 0:
            raise ValueError("temperatures must be positive")
        if self.loss_mapping not in LOSS_MAPPINGS:
            raise ValueError(f"loss_mapping must be one of {LOSS_MAPPINGS}")

    def tau(self, epoch: int) -> float:
        """Exponential anneal from ``tau_start`` to ``tau_end`` over the joint epochs."""
        if self.epochs <= 1:
            return self.tau_end
        frac = min(max(epoch / (self.epochs - 1), 0.0), 1.0)
        return float(self.tau_start * (self.tau_end / self.tau_start) ** frac)

    @property
    def cost_weight(self) -> float:
        return self.alpha if self.loss_mapping == "alpha_cost" else self.beta

    @property
    def balance_weight(self) -> float:
        return self.beta if self.loss_mapping == "alpha_cost" else self.alpha

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "TrainConfig":
        raw = json.loads(text)
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**raw)

    @classmethod
    def load(cls, path) -> "TrainConfig":
        return cls.from_json(Path(path).read_text())


# ---------------------------------------------------------------- primitives


def softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    z = z - np.max(z, axis=axis, keepdims=True)
    ez = np.exp(z)
    return ez / np.sum(ez, axis=axis, keepdims=True)


def log_softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    z = z - np.max(z, axis=axis, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=axis, keepdims=True))


def sample_gumbel(shape, rng: np.random.Generator) -> np.ndarray:
    u = rng.random(shape)
    u = np.clip(u, np.finfo(np.float64).tiny, 1.0 - 1e-16)
    return -np.log(-np.log(u))


def gumbel_softmax(logits, tau: float, rng: np.random.Generator | None = None, noise=None) -> np.ndarray:
    """``softmax((logits + G) / tau)``; ``G = 0`` when neither rng nor noise is given."""
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    logits = np.asarray(logits, dtype=np.float64)
    if noise is None:
        noise = sample_gumbel(logits.shape, rng) if rng is not None else 0.0
    return softmax((logits + noise) / tau)


def weighted_prediction(g, expert_outputs) -> np.ndarray:
    """``sum_i g_i * E_i``.  ``g`` is ``[k]`` or ``[B, k]``; outputs ``[k, ...]``."""
    g = np.asarray(g, dtype=np.float64)
    outs = np.asarray(expert_outputs, dtype=np.float64)
    if g.shape[-1] != outs.shape[0]:
        raise ValueError(f"{g.shape[-1]} routing weights for {outs.shape[0]} experts")
    if g.ndim == 1:
        return np.tensordot(g, outs, axes=1)
    return np.einsum("bk,kbc->bc", g, outs)


def task_loss(y_pred, y_true) -> float:
    """Mean cross-entropy of ``softmax(y_pred)`` against integer labels."""
    y_pred = np.atleast_2d(np.asarray(y_pred, dtype=np.float64))
    y_true = np.atleast_1d(np.asarray(y_true))
    if np.any(y_true < 0) or np.any(y_true >= y_pred.shape[-1]):
        raise ValueError("label out of range")
    lp = log_softmax(y_pred)
    return float(-np.mean(lp[np.arange(len(y_true)), y_true]))


def balance_loss(g) -> float:
    """Squared coefficient of variation of per-expert loads ``L_i = sum_x g_i(x)``."""
    loads = np.sum(np.atleast_2d(g), axis=0)
    return _cv2(loads)


def _cv2(loads) -> float:
    loads = np.asarray(loads, dtype=np.float64)
    m = loads.mean()
    if m <= 0:
        raise ValueError("all expert loads are zero")
    return float(loads.var() / m**2)


def balance_loss_grad(g) -> np.ndarray:
    """d L_balance / d g, shape of ``g`` (every row gets the same vector)."""
    g = np.atleast_2d(g)
    loads = g.sum(axis=0)
    k = loads.size
    m = loads.mean()
    var = loads.var()
    dl = 2.0 * (loads - m) / (k * m**2) - 2.0 * var / (k * m**3)
    return np.broadcast_to(dl, g.shape).copy()


def cost_loss(g, c) -> float:
    """Mean expected cost ``(1/|B|) sum_x sum_i g_i(x) c_i``."""
    g = np.atleast_2d(np.asarray(g, dtype=np.float64))
    c = np.asarray(c, dtype=np.float64)
    if g.shape[-1] != c.size:
        raise ValueError(f"{g.shape[-1]} routing weights for {c.size} costs")
    return float(np.mean(g @ c))


def composite_loss(l_task: float, l_balance: float, l_cost: float, cfg: TrainConfig) -> float:
    return l_task + cfg.cost_weight * l_cost + cfg.balance_weight * l_balance


# ---------------------------------------------------------------- networks


class MLP:
    """Dense ReLU network; ``params`` alternates weight and bias arrays."""

    def __init__(self, widths, rng: np.random.Generator | None = None, params=None):
        self.widths = tuple(int(w) for w in widths)
        if params is not None:
            self.params = [np.array(p, dtype=np.float64) for p in params]
            return
        self.params = []
        for din, dout in zip(self.widths[:-1], self.widths[1:]):
            self.params.append(rng.normal(0.0, np.sqrt(2.0 / din), (din, dout)))
            self.params.append(np.zeros(dout))

    def forward(self, x, params=None):
        params = self.params if params is None else params
        cache = [x]
        h = x
        n = len(params) // 2
        for i in range(n):
            h = h @ params[2 * i] + params[2 * i + 1]
            if i < n - 1:
                cache.append(h)
                h = np.maximum(h, 0.0)
                cache.append(h)
        return h, cache

    def backward(self, cache, dout, params=None) -> list:
        params = self.params if params is None else params
        n = len(params) // 2
        grads = [None] * len(params)
        d = dout
        for i in reversed(range(n)):
            inp = cache[0] if i == 0 else cache[2 * i]
            grads[2 * i] = inp.T @ d
            grads[2 * i + 1] = d.sum(axis=0)
            if i > 0:
                d = (d @ params[2 * i].T) * (cache[2 * i - 1] > 0)
        return grads

    def copy(self) -> "MLP":
        return MLP(self.widths, params=[p.copy() for p in self.params])


@dataclass
class RoutedModel:
    router: MLP
    experts: list
    seq_len: int

    def all_params(self) -> list:
        return self.router.params + [p for e in self.experts for p in e.params]

    def set_params(self, flat_list) -> None:
        n = len(self.router.params)
        self.router.params = list(flat_list[:n])
        off = n
        for e in self.experts:
            m = len(e.params)
            e.params = list(flat_list[off:off + m])
            off += m

    def copy(self) -> "RoutedModel":
        return RoutedModel(self.router.copy(), [e.copy() for e in self.experts], self.seq_len)

    def router_logits(self, emb) -> np.ndarray:
        return self.router.forward(emb.mean(axis=1))[0]

    def expert_logits(self, i: int, emb) -> np.ndarray:
        return self.experts[i].forward(emb.reshape(len(emb), -1))[0]

    def route(self, emb) -> np.ndarray:
        """Hard inference-time routing: argmax of noise-free router logits."""
        return np.argmax(self.router_logits(emb), axis=1)

    def predict(self, emb) -> np.ndarray:
        sel = self.route(emb)
        flat = emb.reshape(len(emb), -1)
        out = np.empty(len(emb), dtype=np.int64)
        for i in np.unique(sel):
            m = sel == i
            out[m] = np.argmax(self.experts[i].forward(flat[m])[0], axis=1)
        return out


@dataclass
class RoutingOutput:
    logits: np.ndarray
    g: np.ndarray
    expert_outputs: np.ndarray
    y_pred: np.ndarray


@dataclass
class LossRecord:
    total: float
    task: float
    balance: float
    cost: float
    hist: np.ndarray


def _fake_quant(arrs, codec: FixedPointCodec):
    return [codec.decode(codec.encode(a)) for a in arrs]


def forward_backward(model: RoutedModel, emb, labels, costs, cfg: TrainConfig, tau: float,
                     noise, codec: FixedPointCodec | None = None):
    """Loss and gradients for one batch with frozen Gumbel ``noise``.

    With ``codec`` set, the forward pass runs on fixed-point rounded weights
    and inputs and the gradients evaluated there are returned for the real
    weights (quantization-aware fine-tuning).
    """
    b = len(emb)
    k = len(model.experts)
    rparams = model.router.params
    eparams = [e.params for e in model.experts]
    if codec is not None:
        emb = codec.decode(codec.encode(emb))
        rparams = _fake_quant(rparams, codec)
        eparams = [_fake_quant(p, codec) for p in eparams]
    summary = emb.mean(axis=1)
    flat = emb.reshape(b, -1)
    logits, rcache = model.router.forward(summary, rparams)
    g = gumbel_softmax(logits, tau, noise=noise)
    outs, caches = [], []
    for e, p in zip(model.experts, eparams):
        o, c = e.forward(flat, p)
        outs.append(o)
        caches.append(c)
    outs = np.stack(outs)
    y = weighted_prediction(g, outs)

    lt = task_loss(y, labels)
    lb = balance_loss(g)
    lc = cost_loss(g, costs)
    total = composite_loss(lt, lb, lc, cfg)
    if not np.isfinite(total):
        raise TrainingError(f"non-finite loss: task={lt} balance={lb} cost={lc} tau={tau}")

    dy = softmax(y)
    dy[np.arange(b), labels] -= 1.0
    dy /= b
    dg = np.einsum("bc,kbc->bk", dy, outs)
    dg += cfg.cost_weight * np.asarray(costs, dtype=np.float64)[None, :] / b
    dg += cfg.balance_weight * balance_loss_grad(g)
    du = g * (dg - np.sum(dg * g, axis=1, keepdims=True))
    dlogits = du / tau

    grads = model.router.backward(rcache, dlogits, rparams)
    for i, (e, p) in enumerate(zip(model.experts, eparams)):
        grads += e.backward(caches[i], g[:, i:i + 1] * dy, p)
    hist = np.bincount(np.argmax(g, axis=1), minlength=k)
    return LossRecord(total, lt, lb, lc, hist), grads, RoutingOutput(logits, g, outs, y)


def train_step(model: RoutedModel, emb, labels, costs, cfg: TrainConfig, tau: float,
               rng: np.random.Generator, codec: FixedPointCodec | None = None) -> LossRecord:
    noise = sample_gumbel((len(emb), len(model.experts)), rng)
    rec, grads, _ = forward_backward(model, emb, labels, costs, cfg, tau, noise, codec)
    if cfg.lr:
        model.set_params([p - cfg.lr * g for p, g in zip(model.all_params(), grads)])
    return rec


def _batches(n: int, size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for i in range(0, n, size):
        yield order[i:i + size]


def pretrain_expert(mlp: MLP, emb, labels, epochs: int, lr: float, batch: int, rng) -> None:
    flat = emb.reshape(len(emb), -1)
    for _ in range(epochs):
        for idx in _batches(len(flat), batch, rng):
            out, cache = mlp.forward(flat[idx])
            d = softmax(out)
            d[np.arange(len(idx)), labels[idx]] -= 1.0
            grads = mlp.backward(cache, d / len(idx))
            mlp.params = [p - lr * g for p, g in zip(mlp.params, grads)]


# ---------------------------------------------------------------- data


@dataclass
class Dataset:
    emb: np.ndarray  # [n, seq, d]
    labels: np.ndarray  # [n]
    difficulty: np.ndarray  # [n] 0 = easy, 1 = medium, 2 = hard

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.emb[idx], self.labels[idx], self.difficulty[idx])


def make_dataset(n: int, rng: np.random.Generator, d: int = 8, seq_len: int = 4, classes: int = 8,
                 mix=(0.4, 0.3, 0.3), token_noise: float = 0.05, grid: int = 6,
                 table_seed: int = 12345) -> Dataset:
    """Gaussian-cluster classification with easy, medium and hard regions.

    Feature 0 places a sample in one of three clusters (-3, 0, +3), which the
    router can read off the mean-pooled summary.  Within a cluster the label
    depends on features 1 and 2:

    * easy: angular sector, a linear boundary;
    * medium: radial band with equal-mass quantiles, smoothly nonlinear;
    * hard: a fixed random label table over a ``grid x grid`` partition of
      ``[-2, 2]^2``, which needs many hidden units to carve out.

    Each token is the sample vector plus independent noise.  ``table_seed``
    fixes the hard-region table so train and test splits share it.
    """
    if d < 3:
        raise ValueError("need at least 3 features")
    if classes < 2:
        raise ValueError("need at least 2 classes")
    mix = np.asarray(mix, dtype=np.float64)
    diff = rng.choice(3, size=n, p=mix / mix.sum())
    x = rng.normal(0.0, 1.0, (n, d))
    x[:, 0] = np.array([-3.0, 0.0, 3.0])[diff] + rng.normal(0.0, 0.3, n)
    plane = x[:, 1:3]

    angles = np.arange(classes) * 2.0 * np.pi / classes
    easy = np.argmax(plane @ np.stack([np.cos(angles), np.sin(angles)]), axis=1)
    bands = -2.0 * np.log(1.0 - np.arange(1, classes) / classes)
    medium = np.searchsorted(bands, np.sum(plane**2, axis=1))
    table = np.random.default_rng(table_seed).integers(0, classes, (grid, grid))
    cell = np.clip(np.floor((plane + 2.0) * grid / 4.0).astype(np.int64), 0, grid - 1)
    hard = table[cell[:, 0], cell[:, 1]]

    y = np.where(diff == 0, easy, np.where(diff == 1, medium, hard)).astype(np.int64)
    emb = x[:, None, :] + rng.normal(0.0, token_noise, (n, seq_len, d))
    return Dataset(emb, y, diff)


# ---------------------------------------------------------------- driver


DEFAULT_LADDER = (("tiny", (16,)), ("base", (64,)), ("large", (256,)))
WIDTHS = {"tiny": (16,), "mini": (24,), "small": (32,), "base": (64,), "large": (256,)}


def ladder_specs(input_dim: int, classes: int, costs, ladder=DEFAULT_LADDER, frac_bits: int = 16) -> list:
    if len(costs) != len(ladder):
        raise ValueError(f"{len(costs)} costs for {len(ladder)} experts")
    return [ExpertSpec(name, (input_dim, *hidden, classes), float(c), frac_bits)
            for (name, hidden), c in zip(ladder, costs)]


@dataclass
class TrainResult:
    model: RoutedModel
    router: RouterPolicy
    pool: ModelPool
    history: list = field(default_factory=list)


def init_model(specs, d: int, seq_len: int, cfg: TrainConfig, rng) -> RoutedModel:
    router = MLP((d, cfg.router_hidden, len(specs)), rng)
    experts = [MLP(s.widths, rng) for s in specs]
    return RoutedModel(router, experts, seq_len)


def train(data: Dataset, specs, cfg: TrainConfig, codec: FixedPointCodec | None = None) -> TrainResult:
    """Warm up each expert alone, train jointly with annealed tau, then QAT, then quantize."""
    codec = codec or FixedPointCodec(specs[0].frac_bits)
    rng = np.random.default_rng(cfg.seed)
    n, seq_len, d = data.emb.shape
    model = init_model(specs, d, seq_len, cfg, rng)
    costs = np.array([s.cost for s in specs], dtype=np.float64)
    for e in model.experts:
        pretrain_expert(e, data.emb, data.labels, cfg.warmup_epochs, cfg.lr, cfg.batch_size, rng)

    history = []
    total_epochs = cfg.epochs + cfg.qat_epochs
    for epoch in range(total_epochs):
        qat = epoch >= cfg.epochs
        tau = cfg.tau_end if qat else cfg.tau(epoch)
        sums = np.zeros(3)
        hist = np.zeros(len(specs), dtype=np.int64)
        for idx in _batches(n, cfg.batch_size, rng):
            rec = train_step(model, data.emb[idx], data.labels[idx], costs, cfg, tau, rng,
                             codec if qat else None)
            sums += np.array([rec.task, rec.balance, rec.cost]) * len(idx)
            hist += rec.hist
        sums /= n
        history.append({"epoch": epoch, "L_task": sums[0], "L_balance": sums[1],
                        "L_cost": sums[2], "hist": hist.tolist()})

    router = RouterPolicy.from_weights(model.router.params, seq_len, codec)
    pool = ModelPool.from_weights(specs, [e.params for e in model.experts], codec)
    return TrainResult(model, router, pool, history)


def write_history(history, path) -> None:
    k = len(history[0]["hist"]) if history else 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "L_task", "L_balance", "L_cost"] + [f"hist_{i + 1}" for i in range(k)])
        for h in history:
            w.writerow([h["epoch"], repr(h["L_task"]), repr(h["L_balance"]), repr(h["L_cost"])] + h["hist"])


# ---------------------------------------------------------------- evaluation


def f1_score(y_true, y_pred) -> float:
    """Macro-averaged F1 over the classes that occur in either argument."""
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    scores = []
    for c in np.union1d(y_true, y_pred):
        tp = np.sum((y_pred == c) & (y_true == c))
        fp = np.sum((y_pred == c) & (y_true != c))
        fn = np.sum((y_pred != c) & (y_true == c))
        scores.append(2 * tp / (2 * tp + fp + fn))
    return float(np.mean(scores)) if scores else 1.0


def selection_shares(model: RoutedModel, emb) -> np.ndarray:
    sel = model.route(emb)
    return np.bincount(sel, minlength=len(model.experts)) / len(sel)


def evaluate(model: RoutedModel, data: Dataset, costs) -> dict:
    pred = model.predict(data.emb)
    shares = selection_shares(model, data.emb)
    return {
        "accuracy": float(np.mean(pred == data.labels)),
        "f1": f1_score(data.labels, pred),
        "shares": shares,
        "expected_cost": float(shares @ np.asarray(costs, dtype=np.float64)),
        "cv2": _cv2(shares) if shares.sum() else 0.0,
    }


def demo_artifacts(seed: int, n: int = 2000) -> tuple:
    """A quickly trained two-expert pool (tiny and large) for smoke runs."""
    tr, te = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(2))
    data = make_dataset(n, tr)
    classes = int(data.labels.max()) + 1
    specs = ladder_specs(int(np.prod(data.emb.shape[1:])), classes, (2.0, 13.0),
                         ladder=(DEFAULT_LADDER[0], DEFAULT_LADDER[2]))
    cfg = TrainConfig(epochs=4, warmup_epochs=6, seed=seed)
    res = train(data, specs, cfg)
    return res.router, res.pool, make_dataset(200, te)
