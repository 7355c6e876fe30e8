"""Expert pool and router representation, quantization and file formats.

On disk a pool is a JSON manifest plus one binary blob per expert.  Blobs hold
the layer tensors (W1, b1, W2, b2, ...) in the wire tensor layout behind a
``SRPOOL`` header.  Per-party share files use the same layout behind an
``SRSHRE`` header carrying the party id.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CorruptFileError, ProtocolError
from .ring import U64, FixedPointCodec
from .sharing import SharedTensor, share
from .transport import decode_tensor, encode_tensor

POOL_MAGIC = b"SRPOOL"
SHARE_MAGIC = b"SRSHRE"
FORMAT_VERSION = 1
MAX_EXPERTS = 8


@dataclass(frozen=True)
class ExpertSpec:
    """An MLP expert: ``widths = (input, hidden..., classes)``, ReLU between layers."""

    name: str
    widths: tuple
    cost: float = 1.0
    frac_bits: int = 16
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if len(self.widths) < 2 or min(self.widths) < 1:
            raise ValueError(f"{self.name}: bad widths {self.widths}")
        if not self.cost > 0:
            raise ValueError(f"{self.name}: cost must be positive, got {self.cost}")
        if self.activation != "relu":
            raise ValueError(f"{self.name}: unsupported activation {self.activation}")

    @property
    def param_count(self) -> int:
        w = self.widths
        return sum(w[i] * w[i + 1] + w[i + 1] for i in range(len(w) - 1))

    def layout(self) -> list:
        """``[((w_offset, w_shape), (b_offset, b_shape)), ...]`` into the flat vector."""
        out, off = [], 0
        for i in range(len(self.widths) - 1):
            din, dout = self.widths[i], self.widths[i + 1]
            wl = (off, (din, dout))
            off += din * dout
            bl = (off, (dout,))
            off += dout
            out.append((wl, bl))
        return out

    def to_json(self) -> dict:
        return {"name": self.name, "widths": list(self.widths), "cost": self.cost,
                "frac_bits": self.frac_bits, "activation": self.activation,
                "param_count": self.param_count}

    @classmethod
    def from_json(cls, d: dict) -> "ExpertSpec":
        spec = cls(d["name"], tuple(d["widths"]), float(d["cost"]), int(d["frac_bits"]),
                   d.get("activation", "relu"))
        if "param_count" in d and d["param_count"] != spec.param_count:
            raise CorruptFileError(f"{spec.name}: parameter count disagrees with widths")
        return spec


def flatten_params(tensors) -> np.ndarray:
    return np.concatenate([np.asarray(t).reshape(-1) for t in tensors]) if tensors else np.zeros(0)


def unflatten_params(flat, spec: ExpertSpec) -> list:
    out = []
    for (wo, ws), (bo, bs) in spec.layout():
        out.append(flat[wo:wo + ws[0] * ws[1]].reshape(ws))
        out.append(flat[bo:bo + bs[0]])
    return out


def envelope(specs) -> ExpertSpec:
    """The smallest architecture every spec embeds into by zero padding."""
    depths = {len(s.widths) for s in specs}
    if len(depths) != 1:
        raise ValueError("experts of different depth cannot share an envelope")
    ins = {s.widths[0] for s in specs}
    outs = {s.widths[-1] for s in specs}
    if len(ins) != 1 or len(outs) != 1:
        raise ValueError("experts must agree on input and output widths")
    widths = tuple(max(s.widths[i] for s in specs) for i in range(depths.pop()))
    return ExpertSpec("envelope", widths, max(s.cost for s in specs), specs[0].frac_bits)


def embedding_index(spec: ExpertSpec, env: ExpertSpec) -> np.ndarray:
    """Positions in ``env``'s flat vector that hold ``spec``'s parameters, in order.

    Padded hidden units get zero weights in and out and zero bias, so ReLU
    keeps them at zero and the padded network computes the same function.
    """
    idx = []
    for ((wo, ws), (bo, bs)), ((ewo, ews), (ebo, _)) in zip(spec.layout(), env.layout()):
        r, c = np.meshgrid(np.arange(ws[0]), np.arange(ws[1]), indexing="ij")
        idx.append((ewo + r * ews[1] + c).reshape(-1))
        idx.append(ebo + np.arange(bs[0]))
    return np.concatenate(idx)


def quantize(weights, codec: FixedPointCodec) -> tuple[list, float]:
    """Encode each tensor; returns ``(blobs, max_abs_quantization_error)``."""
    blobs, err = [], 0.0
    for w in weights:
        w = np.asarray(w, dtype=np.float64)
        q = codec.encode(w)
        if w.size:
            err = max(err, float(np.max(np.abs(codec.decode(q) - w))))
        blobs.append(q)
    return blobs, err


def dequantize(blobs, codec: FixedPointCodec) -> list:
    return [codec.decode(b) for b in blobs]


@dataclass
class ModelPool:
    experts: list
    blobs: list  # per expert: list of uint64 layer tensors W1, b1, W2, b2, ...
    frac_bits: int = 16
    quantization_error: float = 0.0

    @property
    def k(self) -> int:
        return len(self.experts)

    @property
    def costs(self) -> np.ndarray:
        return np.array([e.cost for e in self.experts], dtype=np.float64)

    def validate(self) -> None:
        if not 2 <= self.k <= MAX_EXPERTS:
            raise ValueError(f"pool needs 2..{MAX_EXPERTS} experts, has {self.k}")
        names = [e.name for e in self.experts]
        if len(set(names)) != len(names):
            raise ValueError(f"expert names must be unique: {names}")
        if len(self.blobs) != self.k:
            raise ValueError("one blob set per expert required")
        for spec, blob in zip(self.experts, self.blobs):
            shapes = [s for layer in spec.layout() for _, s in layer]
            if [tuple(b.shape) for b in blob] != [tuple(s) for s in shapes]:
                raise ValueError(f"{spec.name}: blob shapes do not match widths")
        envelope(self.experts)

    def flat(self, i: int) -> np.ndarray:
        return flatten_params(self.blobs[i]).astype(U64)

    def weights(self, i: int) -> list:
        return dequantize(self.blobs[i], FixedPointCodec(self.frac_bits))

    def public_manifest(self) -> dict:
        return {"frac_bits": self.frac_bits, "experts": [e.to_json() for e in self.experts]}

    def digest(self) -> bytes:
        return manifest_digest(self.public_manifest())

    @classmethod
    def from_weights(cls, experts, weights, codec: FixedPointCodec) -> "ModelPool":
        blobs, err = [], 0.0
        for w in weights:
            b, e = quantize(w, codec)
            blobs.append(b)
            err = max(err, e)
        return cls(list(experts), blobs, codec.frac_bits, err)


@dataclass
class RouterPolicy:
    """Two-layer router over the mean-pooled embedding: ReLU(s W1 + R1) W2 + R2."""

    w1: np.ndarray
    r1: np.ndarray
    w2: np.ndarray
    r2: np.ndarray
    seq_len: int = 1
    frac_bits: int = 16

    @property
    def d_s(self) -> int:
        return self.w1.shape[0]

    @property
    def hidden(self) -> int:
        return self.w1.shape[1]

    @property
    def k(self) -> int:
        return self.w2.shape[1]

    def tensors(self) -> list:
        return [self.w1, self.r1, self.w2, self.r2]

    def public_manifest(self) -> dict:
        return {"d_s": self.d_s, "hidden": self.hidden, "k": self.k,
                "seq_len": self.seq_len, "frac_bits": self.frac_bits}

    def digest(self) -> bytes:
        return manifest_digest(self.public_manifest())

    @classmethod
    def from_weights(cls, weights, seq_len: int, codec: FixedPointCodec) -> "RouterPolicy":
        q, _ = quantize(weights, codec)
        return cls(*q, seq_len=seq_len, frac_bits=codec.frac_bits)


def manifest_digest(manifest: dict) -> bytes:
    return hashlib.sha256(json.dumps(manifest, sort_keys=True).encode()).digest()


# ---------------------------------------------------------------- blob IO

_POOL_HEAD = struct.Struct("<6sBQ")
_SHARE_HEAD = struct.Struct("<6sBBQ")


def write_blob(path, tensors, scale: int, party: int | None = None) -> None:
    if party is None:
        head = _POOL_HEAD.pack(POOL_MAGIC, FORMAT_VERSION, len(tensors))
    else:
        head = _SHARE_HEAD.pack(SHARE_MAGIC, FORMAT_VERSION, party, len(tensors))
    with open(path, "wb") as fh:
        fh.write(head)
        for t in tensors:
            fh.write(encode_tensor(t, scale))


def read_blob(path, party: int | None = None) -> tuple[list, int]:
    """Returns ``(tensors, scale)``."""
    raw = Path(path).read_bytes()
    head = _POOL_HEAD if party is None else _SHARE_HEAD
    if len(raw) < head.size:
        raise CorruptFileError(f"{path}: file shorter than header")
    fields = head.unpack_from(raw)
    magic, version = fields[0], fields[1]
    want = POOL_MAGIC if party is None else SHARE_MAGIC
    if magic != want:
        raise CorruptFileError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise CorruptFileError(f"{path}: unsupported version {version}")
    if party is not None and fields[2] != party:
        raise CorruptFileError(f"{path}: share file belongs to party {fields[2]}, not {party}")
    count = fields[-1]
    off, out, scale = head.size, [], 0
    try:
        for _ in range(count):
            arr, scale, off = decode_tensor(raw, off)
            out.append(arr)
    except ProtocolError as exc:
        raise CorruptFileError(f"{path}: {exc}") from exc
    if off != len(raw):
        raise CorruptFileError(f"{path}: trailing bytes after {count} tensors")
    return out, scale


def _read_manifest(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CorruptFileError(f"{path}: unreadable manifest ({exc})") from exc


def _check_version(m: dict, kind: str, path) -> None:
    if m.get("kind") != kind:
        raise CorruptFileError(f"{path}: expected a {kind} manifest")
    if m.get("version") != FORMAT_VERSION:
        raise CorruptFileError(f"{path}: unsupported version {m.get('version')}")


def save_pool(pool: ModelPool, path) -> Path:
    """Write ``path`` (a ``.json`` manifest) and sibling ``<stem>.<i>.bin`` blobs."""
    pool.validate()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, (spec, blob) in enumerate(zip(pool.experts, pool.blobs)):
        name = f"{path.stem}.{i}.bin"
        write_blob(path.parent / name, blob, pool.frac_bits)
        entries.append({**spec.to_json(), "blob": name})
    manifest = {"kind": "pool", "version": FORMAT_VERSION, "frac_bits": pool.frac_bits,
                "quantization_error": pool.quantization_error, "experts": entries}
    path.write_text(json.dumps(manifest, indent=2))
    return path


def load_pool(path) -> ModelPool:
    path = Path(path)
    m = _read_manifest(path)
    _check_version(m, "pool", path)
    try:
        experts, blobs = [], []
        for e in m["experts"]:
            spec = ExpertSpec.from_json(e)
            tensors, scale = read_blob(path.parent / e["blob"])
            if scale != m["frac_bits"]:
                raise CorruptFileError(f"{path}: blob scale {scale} != {m['frac_bits']}")
            experts.append(spec)
            blobs.append(tensors)
        pool = ModelPool(experts, blobs, int(m["frac_bits"]), float(m.get("quantization_error", 0.0)))
    except (KeyError, TypeError) as exc:
        raise CorruptFileError(f"{path}: malformed manifest ({exc})") from exc
    try:
        pool.validate()
    except ValueError as exc:
        raise CorruptFileError(f"{path}: {exc}") from exc
    return pool


def save_router(router: RouterPolicy, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    name = f"{path.stem}.bin"
    write_blob(path.parent / name, router.tensors(), router.frac_bits)
    path.write_text(json.dumps({"kind": "router", "version": FORMAT_VERSION,
                                **router.public_manifest(), "blob": name}, indent=2))
    return path


def load_router(path) -> RouterPolicy:
    path = Path(path)
    m = _read_manifest(path)
    _check_version(m, "router", path)
    tensors, _ = read_blob(path.parent / m["blob"])
    if len(tensors) != 4:
        raise CorruptFileError(f"{path}: router blob must hold 4 tensors")
    r = RouterPolicy(*tensors, seq_len=int(m["seq_len"]), frac_bits=int(m["frac_bits"]))
    if r.public_manifest() != {k: m[k] for k in r.public_manifest()}:
        raise CorruptFileError(f"{path}: router tensors disagree with manifest")
    return r


# ---------------------------------------------------------------- sharing


@dataclass
class PoolShares:
    """One party's view of the pool: public specs plus a ``[k, P]`` share matrix.

    Row ``i`` is expert ``i`` embedded (zero-padded) into the envelope
    architecture, so one matrix serves both oblivious selection and
    revealed-index extraction.
    """

    party: int
    experts: list
    matrix: SharedTensor
    frac_bits: int = 16
    env: ExpertSpec = field(init=False)

    def __post_init__(self):
        self.env = envelope(self.experts)

    @property
    def k(self) -> int:
        return len(self.experts)

    def public_manifest(self) -> dict:
        return {"frac_bits": self.frac_bits, "experts": [e.to_json() for e in self.experts]}

    def digest(self) -> bytes:
        return manifest_digest(self.public_manifest())

    def expert_params(self, i: int) -> SharedTensor:
        """Expert ``i``'s own (unpadded) parameter shares."""
        idx = embedding_index(self.experts[i], self.env)
        return self.matrix.like(self.matrix.data[i, idx])


@dataclass
class RouterShares:
    party: int
    w1: SharedTensor
    r1: SharedTensor
    w2: SharedTensor
    r2: SharedTensor
    seq_len: int
    frac_bits: int = 16

    def public_manifest(self) -> dict:
        return {"d_s": self.w1.shape[0], "hidden": self.w1.shape[1], "k": self.w2.shape[1],
                "seq_len": self.seq_len, "frac_bits": self.frac_bits}

    def digest(self) -> bytes:
        return manifest_digest(self.public_manifest())


def padded_matrix(pool: ModelPool) -> np.ndarray:
    env = envelope(pool.experts)
    mat = np.zeros((pool.k, env.param_count), dtype=U64)
    for i, spec in enumerate(pool.experts):
        mat[i, embedding_index(spec, env)] = pool.flat(i)
    return mat


def secret_share_pool(pool: ModelPool, rng: np.random.Generator) -> tuple[PoolShares, PoolShares]:
    pool.validate()
    s0, s1 = share(padded_matrix(pool), rng, pool.frac_bits)
    return (PoolShares(0, list(pool.experts), s0, pool.frac_bits),
            PoolShares(1, list(pool.experts), s1, pool.frac_bits))


def secret_share_router(router: RouterPolicy, rng: np.random.Generator) -> tuple[RouterShares, RouterShares]:
    parts = [share(t, rng, router.frac_bits) for t in router.tensors()]
    return tuple(RouterShares(p, *(pr[p] for pr in parts), seq_len=router.seq_len,
                              frac_bits=router.frac_bits) for p in (0, 1))


def save_pool_shares(ps: PoolShares, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    name = f"{path.stem}.bin"
    write_blob(path.parent / name, [ps.matrix.data], ps.frac_bits, party=ps.party)
    path.write_text(json.dumps({"kind": "pool-shares", "version": FORMAT_VERSION,
                                "party": ps.party, **ps.public_manifest(), "blob": name}, indent=2))
    return path


def load_pool_shares(path) -> PoolShares:
    path = Path(path)
    m = _read_manifest(path)
    _check_version(m, "pool-shares", path)
    party = int(m["party"])
    (mat,), scale = read_blob(path.parent / m["blob"], party=party)
    experts = [ExpertSpec.from_json(e) for e in m["experts"]]
    ps = PoolShares(party, experts, SharedTensor(party, mat, scale), int(m["frac_bits"]))
    if mat.shape != (ps.k, ps.env.param_count):
        raise CorruptFileError(f"{path}: share matrix shape {mat.shape} does not match specs")
    return ps


def save_router_shares(rs: RouterShares, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    name = f"{path.stem}.bin"
    write_blob(path.parent / name, [rs.w1.data, rs.r1.data, rs.w2.data, rs.r2.data],
               rs.frac_bits, party=rs.party)
    path.write_text(json.dumps({"kind": "router-shares", "version": FORMAT_VERSION,
                                "party": rs.party, **rs.public_manifest(), "blob": name}, indent=2))
    return path


def load_router_shares(path) -> RouterShares:
    path = Path(path)
    m = _read_manifest(path)
    _check_version(m, "router-shares", path)
    party = int(m["party"])
    tensors, scale = read_blob(path.parent / m["blob"], party=party)
    if len(tensors) != 4:
        raise CorruptFileError(f"{path}: router share blob must hold 4 tensors")
    parts = [SharedTensor(party, t, scale) for t in tensors]
    return RouterShares(party, *parts, seq_len=int(m["seq_len"]), frac_bits=int(m["frac_bits"]))
