"""Multi-view graph attention matcher with Sinkhorn partial assignment.

Keypoints of all frames form one graph.  Layers alternate between
self-edges (same frame) and cross-edges (every other frame), then each
frame pair is scored by dot products and resolved by a log-domain
Sinkhorn with a learnable dustbin.  A small head predicts a confidence
for every extracted match.
"""

from __future__ import annotations

import itertools
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import diffcore as dc
from .errors import ConfigError, ShapeError

SCHEDULE_MULTIVIEW = ("self", "cross", "cross", "cross") * 7
SCHEDULE_TWO_VIEW = ("self", "cross") * 9
SCHEDULE_TOY = ("self", "cross", "self", "cross")
ENCODER_WIDTHS = (32, 64, 128, 256)
HEADS = 4
SINKHORN_ITERS = 100
NORM_EPS = 1e-5
MASK = -1e30
WEIGHTS_MAGIC = b"PKE2"
WEIGHTS_VERSION = 1


@dataclass
class KeypointSet:
    coords: np.ndarray
    confidences: np.ndarray
    descriptors: np.ndarray
    image_size: tuple = (640, 480)

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=float).reshape(-1, 2)
        self.confidences = np.asarray(self.confidences, dtype=float).reshape(-1)
        self.descriptors = np.asarray(self.descriptors, dtype=float)
        k = len(self.coords)
        if k < 1:
            raise ValueError("a keypoint set needs at least one keypoint")
        if len(self.confidences) != k or self.descriptors.ndim != 2 or len(self.descriptors) != k:
            raise ShapeError("KeypointSet", self.coords.shape, self.confidences.shape, self.descriptors.shape)
        if not np.all(np.isfinite(self.descriptors)):
            raise ValueError("descriptors must be finite")
        w, h = self.image_size
        if np.any(self.coords < 0) or np.any(self.coords[:, 0] > w) or np.any(self.coords[:, 1] > h):
            raise ValueError("keypoint outside the image")
        if np.any(self.confidences < 0) or np.any(self.confidences > 1):
            raise ValueError("confidences must lie in [0, 1]")

    def __len__(self):
        return len(self.coords)

    def permuted(self, perm) -> "KeypointSet":
        return KeypointSet(self.coords[perm], self.confidences[perm], self.descriptors[perm], self.image_size)

    def to_dict(self) -> dict:
        return {"coords": self.coords.tolist(), "confidences": self.confidences.tolist(),
                "descriptors": self.descriptors.tolist()}

    @classmethod
    def from_dict(cls, d: dict, image_size=(640, 480)) -> "KeypointSet":
        return cls(np.array(d["coords"], dtype=float), np.array(d["confidences"], dtype=float),
                   np.array(d["descriptors"], dtype=float), tuple(image_size))


# -- configuration and parameters ---------------------------------------------

@dataclass(frozen=True)
class MatcherConfig:
    dim: int = 32
    heads: int = HEADS
    schedule: tuple = SCHEDULE_TOY
    encoder: tuple = ENCODER_WIDTHS
    sinkhorn_iters: int = 30

    def __post_init__(self):
        if self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} is not divisible by {self.heads} heads")
        if not self.schedule or self.schedule[0] != "self":
            raise ConfigError("the layer schedule must start with a self layer")
        if any(s not in ("self", "cross") for s in self.schedule):
            raise ConfigError(f"unknown layer kind in {self.schedule}")
        if self.sinkhorn_iters < 1:
            raise ConfigError("sinkhorn_iters must be >= 1")


def _param_shapes(cfg: MatcherConfig) -> list:
    D = cfg.dim
    shapes = []
    widths = (3,) + tuple(cfg.encoder) + (D,)
    for k in range(len(widths) - 1):
        shapes += [(f"enc{k}.W", (widths[k + 1], widths[k])), (f"enc{k}.b", (widths[k + 1],))]
        if k < len(widths) - 2:
            shapes += [(f"enc{k}.g", (widths[k + 1],)), (f"enc{k}.n", (widths[k + 1],))]
    for l in range(len(cfg.schedule)):
        for name in ("W1", "W2", "W3"):
            shapes += [(f"gnn{l}.{name}", (D, D)), (f"gnn{l}.b{name[1]}", (D,))]
        shapes += [(f"gnn{l}.U1", (2 * D, 2 * D)), (f"gnn{l}.c1", (2 * D,)),
                   (f"gnn{l}.g", (2 * D,)), (f"gnn{l}.n", (2 * D,)),
                   (f"gnn{l}.U2", (D, 2 * D)), (f"gnn{l}.c2", (D,))]
    shapes += [("W4", (D, D)), ("b4", (D,)), ("z", ())]
    shapes += [("conf3.0.W", (2 * D, 2 * D)), ("conf3.0.b", (2 * D,)), ("conf3.0.g", (2 * D,)), ("conf3.0.n", (2 * D,)),
               ("conf3.1.W", (D, 2 * D)), ("conf3.1.b", (D,)), ("conf3.1.g", (D,)), ("conf3.1.n", (D,)),
               ("conf2.0.W", (D, 1)), ("conf2.0.b", (D,)), ("conf2.0.g", (D,)), ("conf2.0.n", (D,)),
               ("conf2.1.W", (D, D)), ("conf2.1.b", (D,)), ("conf2.1.g", (D,)), ("conf2.1.n", (D,)),
               ("conf1.W", (1, D)), ("conf1.b", (1,))]
    return shapes


@dataclass
class MatcherWeights:
    """All learnable parameters, kept in declaration order."""

    config: MatcherConfig
    params: dict = field(default_factory=dict)

    @classmethod
    def init(cls, config: MatcherConfig, seed: int = 0) -> "MatcherWeights":
        rng = np.random.default_rng(seed)
        params = {}
        shapes = dict(_param_shapes(config))
        for name, shape in _param_shapes(config):
            stem, kind = name.rsplit(".", 1) if "." in name else ("", name)
            if name == "z":
                params[name] = np.array(1.0)
            elif kind == "g":
                params[name] = np.ones(shape)
            elif kind == "n":
                params[name] = np.zeros(shape)
            else:
                # biases share the fan-in of their layer's matrix
                wname = {"b": "W", "c1": "U1", "c2": "U2", "b1": "W1", "b2": "W2", "b3": "W3", "b4": "W4"}.get(kind)
                fan_in = shape[1] if len(shape) == 2 else shapes[(stem + "." if stem else "") + wname][1]
                bound = 1.0 / np.sqrt(fan_in)
                params[name] = rng.uniform(-bound, bound, size=shape)
        return cls(config, params)

    def names(self) -> list:
        return [n for n, _ in _param_shapes(self.config)]

    def bind(self, requires_grad: bool = False) -> dict:
        return {n: dc.tensor(self.params[n], requires_grad) for n in self.names()}

    def copy(self) -> "MatcherWeights":
        return MatcherWeights(self.config, {k: v.copy() for k, v in self.params.items()})

    def n_params(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    # -- binary format --------------------------------------------------------

    def to_bytes(self) -> bytes:
        cfg = self.config
        out = [WEIGHTS_MAGIC, struct.pack("<I", WEIGHTS_VERSION), _config_block(cfg)]
        for name, shape in _param_shapes(cfg):
            arr = np.asarray(self.params[name], dtype="<f8")
            if arr.shape != shape:
                raise ShapeError(f"parameter {name}", arr.shape, shape)
            raw = name.encode()
            out.append(struct.pack("<H", len(raw)) + raw + struct.pack("<I", len(shape)))
            out.append(struct.pack(f"<{len(shape)}I", *shape) + arr.tobytes())
        return b"".join(out)

    @classmethod
    def from_bytes(cls, data: bytes, expect: MatcherConfig | None = None) -> "MatcherWeights":
        if data[:4] != WEIGHTS_MAGIC:
            raise ConfigError("not a weights file (bad magic)")
        (version,) = struct.unpack_from("<I", data, 4)
        if version != WEIGHTS_VERSION:
            raise ConfigError(f"unsupported weights version {version}")
        cfg, pos = _parse_config_block(data, 8)
        if expect is not None and cfg != expect:
            raise ConfigError(f"weights were built for {cfg}, expected {expect}")
        params = {}
        for name, shape in _param_shapes(cfg):
            (n,) = struct.unpack_from("<H", data, pos)
            got = data[pos + 2:pos + 2 + n].decode()
            pos += 2 + n
            (ndim,) = struct.unpack_from("<I", data, pos)
            dims = struct.unpack_from(f"<{ndim}I", data, pos + 4)
            pos += 4 + 4 * ndim
            if got != name or tuple(dims) != shape:
                raise ConfigError(f"parameter block {got}{dims} does not match {name}{shape}")
            size = int(np.prod(shape, dtype=int))
            params[name] = np.frombuffer(data, dtype="<f8", count=size, offset=pos).reshape(shape).astype(np.float64)
            pos += 8 * size
        if pos != len(data):
            raise ConfigError("trailing bytes in weights file")
        return cls(cfg, params)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path, expect: MatcherConfig | None = None) -> "MatcherWeights":
        return cls.from_bytes(Path(path).read_bytes(), expect)


def _config_block(cfg: MatcherConfig) -> bytes:
    kinds = bytes(0 if s == "self" else 1 for s in cfg.schedule)
    return (struct.pack("<IIII", cfg.dim, cfg.heads, cfg.sinkhorn_iters, len(cfg.encoder))
            + struct.pack(f"<{len(cfg.encoder)}I", *cfg.encoder)
            + struct.pack("<I", len(kinds)) + kinds)


def _parse_config_block(data: bytes, pos: int):
    dim, heads, iters, n_enc = struct.unpack_from("<IIII", data, pos)
    pos += 16
    enc = struct.unpack_from(f"<{n_enc}I", data, pos)
    pos += 4 * n_enc
    (n_layers,) = struct.unpack_from("<I", data, pos)
    pos += 4
    schedule = tuple("self" if b == 0 else "cross" for b in data[pos:pos + n_layers])
    return MatcherConfig(dim, heads, schedule, tuple(enc), iters), pos + n_layers


def _params(weights) -> Mapping:
    return weights.bind() if isinstance(weights, MatcherWeights) else weights


def _config(weights, config):
    if config is not None:
        return config
    if isinstance(weights, MatcherWeights):
        return weights.config
    raise ConfigError("bound parameters need an explicit MatcherConfig")


# -- building blocks ---------------------------------------------------------

def feature_norm(x: dc.Tensor, gain, shift) -> dc.Tensor:
    """Per-sample normalization over the feature axis with an affine map."""
    mu = dc.mean(x, -1, keepdims=True)
    xc = x - mu
    var = dc.mean(xc * xc, -1, keepdims=True)
    return xc / dc.sqrt(var + NORM_EPS) * gain + shift


def _dense(x, p, stem, norm=True, act=True, wname="W", bname="b"):
    y = dc.linear(x, p[f"{stem}.{wname}"], p[f"{stem}.{bname}"])
    if norm:
        y = feature_norm(y, p[f"{stem}.g"], p[f"{stem}.n"])
    return dc.relu(y) if act else y


def encode_keypoints(keypoints: KeypointSet, weights, config: MatcherConfig | None = None) -> dc.Tensor:
    """Initial embeddings ``d_i + MLP([x_i, c_i])`` with coordinates scaled to [-1, 1]."""
    p, cfg = _params(weights), _config(weights, config)
    if keypoints.descriptors.shape[1] != cfg.dim:
        raise ConfigError(f"descriptor width {keypoints.descriptors.shape[1]} != D = {cfg.dim}")
    w, h = keypoints.image_size
    xy = keypoints.coords / np.array([w, h], dtype=float) * 2.0 - 1.0
    x = dc.tensor(np.concatenate([xy, keypoints.confidences[:, None]], 1))
    n = len(cfg.encoder) + 1
    for k in range(n):
        x = _dense(x, p, f"enc{k}", norm=k < n - 1, act=k < n - 1)
    return x + keypoints.descriptors


@dataclass
class MessageCounter:
    self_msgs: list = field(default_factory=list)
    cross_msgs: list = field(default_factory=list)

    def add(self, kind: str, layer: int, n: int):
        target = self.self_msgs if kind == "self" else self.cross_msgs
        while len(target) <= layer:
            target.append(0)
        target[layer] += n

    @property
    def per_layer(self) -> tuple:
        """(messages per self layer, messages per cross layer); each must be uniform."""
        s = sorted(set(v for v in self.self_msgs if v))
        c = sorted(set(v for v in self.cross_msgs if v))
        return (s[0] if len(s) == 1 else s, c[0] if len(c) == 1 else c)


def _attention(f: dc.Tensor, p, layer: int, mask: np.ndarray, heads: int) -> dc.Tensor:
    n, D = f.shape
    dh = D // heads
    def split(t):  # (n, D) -> (heads, n, dh)
        return dc.transpose(dc.reshape(t, (n, heads, dh)), (1, 0, 2))
    q = split(dc.linear(f, p[f"gnn{layer}.W1"], p[f"gnn{layer}.b1"]))
    k = split(dc.linear(f, p[f"gnn{layer}.W2"], p[f"gnn{layer}.b2"]))
    v = split(dc.linear(f, p[f"gnn{layer}.W3"], p[f"gnn{layer}.b3"]))
    scores = dc.matmul(q, dc.transpose(k)) * (1.0 / np.sqrt(dh)) + mask
    msg = dc.matmul(dc.softmax(scores, -1), v)  # (heads, n, dh)
    return dc.reshape(dc.transpose(msg, (1, 0, 2)), (n, D))


def gnn_forward(frames: Sequence[KeypointSet], weights, config: MatcherConfig | None = None,
                counter: MessageCounter | None = None) -> list:
    """Final node descriptors, one (K_n x D) tensor per frame."""
    p, cfg = _params(weights), _config(weights, config)
    if len(frames) < 2:
        raise ValueError("gnn_forward needs at least two frames")
    sizes = [len(f) for f in frames]
    frame_of = np.repeat(np.arange(len(frames)), sizes)
    same = frame_of[:, None] == frame_of[None, :]
    masks = {"self": np.where(same, 0.0, MASK), "cross": np.where(same, MASK, 0.0)}
    edges = {"self": int(same.sum()), "cross": int((~same).sum())}
    f = dc.concat([encode_keypoints(kp, p, cfg) for kp in frames], 0)
    for layer, kind in enumerate(cfg.schedule):
        m = _attention(f, p, layer, masks[kind], cfg.heads)
        h = _dense(dc.concat([f, m], 1), p, f"gnn{layer}", wname="U1", bname="c1")
        f = f + dc.linear(h, p[f"gnn{layer}.U2"], p[f"gnn{layer}.c2"])
        if counter is not None:
            counter.add(kind, layer, edges[kind])
    f = dc.linear(f, p["W4"], p["b4"])
    bounds = np.cumsum(sizes)[:-1]
    return [f[lo:hi] for lo, hi in zip(np.r_[0, bounds], np.r_[bounds, len(frame_of)])]


def count_messages(N: int, K: int, schedule: Sequence[str] = SCHEDULE_MULTIVIEW, mode: str = "joint") -> tuple:
    """Messages per (self layer, cross layer) for N frames of K keypoints."""
    if N < 2:
        raise ValueError("count_messages needs N >= 2")
    P = N * (N - 1) // 2
    cross = N * (N - 1) * K * K
    if mode == "joint":
        return N * K * K, cross
    if mode == "pairwise":
        return 2 * P * K * K, cross
    raise ValueError(f"unknown mode {mode!r}")


# -- assignment ----------------------------------------------------------------

def sinkhorn_log(scores: dc.Tensor, z, iters: int) -> dc.Tensor:
    """Log assignment of a (..., m, n) score tensor augmented with dustbins scored ``z``."""
    scores = dc.as_tensor(scores)
    *batch, m, n = scores.shape
    z = dc.as_tensor(z)
    col = dc.reshape(z, (1,) * (len(batch) + 2)) + np.zeros(tuple(batch) + (m, 1))
    row = dc.reshape(z, (1,) * (len(batch) + 2)) + np.zeros(tuple(batch) + (1, n + 1))
    Z = dc.concat([dc.concat([scores, col], -1), row], -2)
    norm = -np.log(m + n)
    log_mu = np.r_[np.full(m, norm), np.log(n) + norm]
    log_nu = np.r_[np.full(n, norm), np.log(m) + norm]
    u = dc.tensor(np.zeros(tuple(batch) + (m + 1,)))
    v = dc.tensor(np.zeros(tuple(batch) + (n + 1,)))
    for _ in range(iters):
        u = log_mu - dc.logsumexp(Z + dc.reshape(v, tuple(batch) + (1, n + 1)), -1)
        v = log_nu - dc.logsumexp(Z + dc.reshape(u, tuple(batch) + (m + 1, 1)), -2)
    return Z + dc.reshape(u, tuple(batch) + (m + 1, 1)) + dc.reshape(v, tuple(batch) + (1, n + 1)) - norm


def assign_pair(f_a, f_b, z, iters: int = SINKHORN_ITERS, log: bool = False) -> dc.Tensor:
    """Partial assignment P_ab, (K_a+1) x (K_b+1), from dot-product scores."""
    scores = dc.matmul(dc.as_tensor(f_a), dc.transpose(dc.as_tensor(f_b)))
    logp = sinkhorn_log(scores, z, iters)
    return logp if log else dc.exp(logp)


def extract_matches(P) -> list:
    """Mutual row/column maxima of the interior that also beat both dustbins."""
    P = P.data if isinstance(P, dc.Tensor) else np.asarray(P)
    inner = P[:-1, :-1]
    if inner.size == 0:
        return []
    best_j = np.argmax(inner, axis=1)
    best_i = np.argmax(inner, axis=0)
    out = []
    for i, j in enumerate(best_j):
        s = inner[i, j]
        if best_i[j] == i and s > P[i, -1] and s > P[-1, j]:
            out.append((i, int(j), float(s)))
    return out


def predict_confidence(f_i, f_j, p_ij, weights, config: MatcherConfig | None = None) -> dc.Tensor:
    """Confidence in (0, 1) for matches with descriptors (M x D) and scores (M,)."""
    p = _params(weights)
    f_i, f_j = dc.as_tensor(f_i), dc.as_tensor(f_j)
    scalar = f_i.ndim == 1
    if scalar:
        f_i, f_j = f_i[None, :], f_j[None, :]
    s = dc.reshape(dc.as_tensor(p_ij), (-1, 1))
    h3 = _dense(_dense(dc.concat([f_i, f_j], 1), p, "conf3.0"), p, "conf3.1")
    h2 = _dense(_dense(s, p, "conf2.0"), p, "conf2.1")
    w = dc.sigmoid(dc.reshape(dc.linear(h2 + h3, p["conf1.W"], p["conf1.b"]), (-1,)))
    return w[0] if scalar else w


# -- tuples ------------------------------------------------------------------------

def tuple_pairs(n: int) -> list:
    """All unordered frame pairs (a < b)."""
    return list(itertools.combinations(range(n), 2))


@dataclass
class PairOutput:
    """Differentiable per-pair results of a matcher pass."""

    a: int
    b: int
    f_a: dc.Tensor
    f_b: dc.Tensor
    log_p: dc.Tensor


def forward_tuple(frames: Sequence[KeypointSet], weights, mode: str = "joint",
                  config: MatcherConfig | None = None, counter: MessageCounter | None = None,
                  pairs: Sequence | None = None) -> list:
    """Descriptors and log assignments for every pair; joint uses one graph pass."""
    p, cfg = _params(weights), _config(weights, config)
    pairs = tuple_pairs(len(frames)) if pairs is None else list(pairs)
    desc = {}
    if mode == "joint":
        feats = gnn_forward(frames, p, cfg, counter)
        for a, b in pairs:
            desc[(a, b)] = (feats[a], feats[b])
    elif mode == "pairwise":
        for a, b in pairs:
            fa, fb = gnn_forward([frames[a], frames[b]], p, cfg, counter)
            desc[(a, b)] = (fa, fb)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    # same-shaped pairs go through Sinkhorn as one batch
    groups = {}
    for key in pairs:
        groups.setdefault((len(frames[key[0]]), len(frames[key[1]])), []).append(key)
    out = {}
    for keys in groups.values():
        fa = dc.stack([desc[k][0] for k in keys])
        fb = dc.stack([desc[k][1] for k in keys])
        logp = assign_pair(fa, fb, p["z"], cfg.sinkhorn_iters, log=True)
        for n, k in enumerate(keys):
            out[k] = PairOutput(k[0], k[1], desc[k][0], desc[k][1], logp[n])
    return [out[k] for k in pairs]


@dataclass
class PairMatches:
    a: int
    b: int
    idx_a: np.ndarray
    idx_b: np.ndarray
    weights: np.ndarray
    scores: np.ndarray

    def __len__(self):
        return len(self.idx_a)


@dataclass
class MatchSet:
    pairs: dict  # (a, b) -> PairMatches

    def entries(self) -> list:
        """Flat (image_a, i, image_b, j, w, score) tuples."""
        return [(pm.a, int(i), pm.b, int(j), float(w), float(s))
                for pm in self.pairs.values()
                for i, j, w, s in zip(pm.idx_a, pm.idx_b, pm.weights, pm.scores)]


def match_outputs(outputs: Sequence[PairOutput], weights, conf_threshold: float | None = None,
                  config: MatcherConfig | None = None) -> tuple:
    """Extract matches and confidences; returns (MatchSet, {pair: confidence tensor})."""
    p = _params(weights)
    pairs, conf = {}, {}
    for o in outputs:
        found = extract_matches(o.log_p.data)
        ia = np.array([m[0] for m in found], dtype=int)
        ib = np.array([m[1] for m in found], dtype=int)
        if len(found):
            p_ij = dc.exp(o.log_p[ia, ib])
            w = predict_confidence(o.f_a[ia], o.f_b[ib], p_ij, p, config)
            wd = w.data.copy()
        else:
            w, wd = None, np.zeros(0)
        keep = np.ones(len(found), dtype=bool) if conf_threshold is None else wd >= conf_threshold
        scores = np.exp(o.log_p.data[ia, ib]) if len(found) else np.zeros(0)
        pairs[(o.a, o.b)] = PairMatches(o.a, o.b, ia[keep], ib[keep], wd[keep], scores[keep])
        conf[(o.a, o.b)] = (w, keep)
    return MatchSet(pairs), conf


def match_tuple(frames: Sequence[KeypointSet], weights: MatcherWeights, mode: str = "joint",
                conf_threshold: float | None = None, counter: MessageCounter | None = None) -> MatchSet:
    with dc.no_grad():
        outputs = forward_tuple(frames, weights, mode, counter=counter)
        return match_outputs(outputs, weights, conf_threshold)[0]
