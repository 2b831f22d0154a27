"""Speaker encoder with a projection head, analytic gradients and checkpoints.

Architecture::

    frames (T x D) -> [affine + ReLU] * len(hidden_dims)
                   -> concat(mean, std) over frames
                   -> affine -> embedding (E)
    embedding      -> [affine + ReLU] * len(head_hidden_dims) -> affine -> logits (K)

Weights are stored as ``(out, in)`` matrices. Everything is batched over a
leading axis; a batch is a stack of equal-length sequences ``(B, T, D)``.
"""

import json
import struct
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional

import numpy as np

from .corpus import atomic_write_bytes
from .errors import (
    ConfigError,
    InvalidInputError,
    InvalidRoleError,
    MagicMismatchError,
    MalformedHeaderError,
    ShapeMismatchError,
    TruncatedFileError,
    VersionMismatchError,
)

VAR_FLOOR = 1e-8
CKPT_MAGIC = b"CSPK"
CKPT_VERSION = 1
ROLES = {"student": 0, "teacher": 1, "finetuned": 2}
ROLE_NAMES = {v: k for k, v in ROLES.items()}

Params = Dict[str, np.ndarray]


@dataclass
class EncoderConfig:
    feature_dim: int = 20
    hidden_dims: List[int] = field(default_factory=lambda: [64, 64])
    embedding_dim: int = 64
    head_hidden_dims: List[int] = field(default_factory=lambda: [128])
    head_output_dim: int = 256

    def __post_init__(self):
        self.hidden_dims = [int(h) for h in self.hidden_dims]
        self.head_hidden_dims = [int(h) for h in self.head_hidden_dims]
        dims = [self.feature_dim, self.embedding_dim, self.head_output_dim,
                *self.hidden_dims, *self.head_hidden_dims]
        if any(int(x) < 1 for x in dims):
            raise ConfigError("encoder dimensions must all be >= 1")
        if self.head_output_dim < 2:
            raise ConfigError("encoder.head_output_dim must be >= 2")

    @property
    def pooled_width(self):
        return self.hidden_dims[-1] if self.hidden_dims else self.feature_dim


def backbone_shapes(cfg):
    shapes = {}
    fan_in = cfg.feature_dim
    for i, h in enumerate(cfg.hidden_dims):
        shapes[f"frame.{i}.weight"] = (h, fan_in)
        shapes[f"frame.{i}.bias"] = (h,)
        fan_in = h
    shapes["embed.weight"] = (cfg.embedding_dim, 2 * cfg.pooled_width)
    shapes["embed.bias"] = (cfg.embedding_dim,)
    return shapes


def head_shapes(cfg):
    shapes = {}
    fan_in = cfg.embedding_dim
    for i, h in enumerate(cfg.head_hidden_dims):
        shapes[f"head.{i}.weight"] = (h, fan_in)
        shapes[f"head.{i}.bias"] = (h,)
        fan_in = h
    shapes["head.out.weight"] = (cfg.head_output_dim, fan_in)
    shapes["head.out.bias"] = (cfg.head_output_dim,)
    return shapes


def glorot_uniform(rng, fan_out, fan_in):
    """Glorot-uniform matrix, rounded to float32-representable values."""
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    w = rng.uniform(-limit, limit, size=(fan_out, fan_in))
    return w.astype(np.float32).astype(np.float64)


def init_params(cfg, rng, with_head=True):
    shapes = dict(backbone_shapes(cfg))
    if with_head:
        shapes.update(head_shapes(cfg))
    params = {}
    for name, shape in shapes.items():
        if name.endswith(".weight"):
            params[name] = glorot_uniform(rng, *shape)
        else:
            params[name] = np.zeros(shape)
    return params


@dataclass
class ForwardTrace:
    x: np.ndarray
    frame_pre: list
    frame_act: list
    mean: np.ndarray
    var: np.ndarray
    std: np.ndarray
    stats: np.ndarray
    embedding: np.ndarray
    head_pre: list = field(default_factory=list)
    head_act: list = field(default_factory=list)
    logits: Optional[np.ndarray] = None


def _n_frame_layers(params):
    n = 0
    while f"frame.{n}.weight" in params:
        n += 1
    return n


def _n_head_layers(params):
    n = 0
    while f"head.{n}.weight" in params:
        n += 1
    return n


def embed_batch(params, x):
    """Embeddings for a ``(B, T, D)`` batch. Returns ``(emb (B, E), trace)``."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3:
        raise InvalidInputError(f"expected a (B, T, D) batch, got shape {x.shape}")
    if x.shape[1] < 2:
        raise InvalidInputError("std pooling needs at least 2 frames")
    if _n_frame_layers(params):
        d_in = params["frame.0.weight"].shape[1]
    else:
        d_in = params["embed.weight"].shape[1] // 2
    if x.shape[2] != d_in:
        raise InvalidInputError(f"feature dim {x.shape[2]} != encoder input {d_in}")
    h = x
    pre, act = [], []
    for i in range(_n_frame_layers(params)):
        z = h @ params[f"frame.{i}.weight"].T + params[f"frame.{i}.bias"]
        h = np.maximum(z, 0.0)
        pre.append(z)
        act.append(h)
    mean = h.mean(axis=1)
    var = ((h - mean[:, None, :]) ** 2).mean(axis=1)
    std = np.sqrt(np.maximum(var, VAR_FLOOR))
    stats = np.concatenate([mean, std], axis=1)
    emb = stats @ params["embed.weight"].T + params["embed.bias"]
    trace = ForwardTrace(x=x, frame_pre=pre, frame_act=act, mean=mean, var=var,
                         std=std, stats=stats, embedding=emb)
    return emb, trace


def embed(params, seq):
    """Embedding of one ``(T, D)`` sequence. Returns ``(emb (E,), trace)``."""
    seq = np.asarray(seq)
    if seq.ndim != 2:
        raise InvalidInputError(f"expected a (T, D) sequence, got shape {seq.shape}")
    emb, trace = embed_batch(params, seq[None])
    return emb[0], trace


def head_forward(params, embedding, trace=None):
    """Projection-head logits for ``(B, E)`` (or ``(E,)``) embeddings.

    If a trace from :func:`embed_batch` is passed it is extended in place so
    :func:`backward` can run through the whole network.
    """
    e = np.asarray(embedding, dtype=np.float64)
    single = e.ndim == 1
    a = e[None] if single else e
    pre, act = [], []
    for i in range(_n_head_layers(params)):
        z = a @ params[f"head.{i}.weight"].T + params[f"head.{i}.bias"]
        a = np.maximum(z, 0.0)
        pre.append(z)
        act.append(a)
    logits = a @ params["head.out.weight"].T + params["head.out.bias"]
    if trace is not None:
        trace.head_pre = pre
        trace.head_act = act
        trace.logits = logits
    return (logits[0] if single else logits), (pre, act)


def forward(params, x):
    emb, trace = embed_batch(params, x)
    head_forward(params, emb, trace)
    return trace.logits, trace


def backward(params, trace, d_logits=None, d_embedding=None):
    """Exact gradients of a scalar loss w.r.t. every parameter.

    ``d_logits`` propagates through the head; ``d_embedding`` is added at
    the embedding (used by finetuning, where the head is absent). Gradients
    are summed over the batch.
    """
    grads = {}
    d_emb = np.zeros_like(trace.embedding)
    if d_logits is not None:
        if trace.logits is None:
            raise InvalidInputError("trace has no head activations")
        if np.size(d_logits) != trace.logits.size:
            raise InvalidInputError(
                f"d_logits has {np.size(d_logits)} entries, logits have {trace.logits.size}"
            )
        g = np.asarray(d_logits, dtype=np.float64).reshape(trace.logits.shape)
        n_head = len(trace.head_act)
        a_prev = trace.head_act[-1] if n_head else trace.embedding
        grads["head.out.weight"] = g.T @ a_prev
        grads["head.out.bias"] = g.sum(axis=0)
        g = g @ params["head.out.weight"]
        for i in reversed(range(n_head)):
            g = g * (trace.head_pre[i] > 0)
            a_prev = trace.head_act[i - 1] if i > 0 else trace.embedding
            grads[f"head.{i}.weight"] = g.T @ a_prev
            grads[f"head.{i}.bias"] = g.sum(axis=0)
            g = g @ params[f"head.{i}.weight"]
        d_emb = d_emb + g
    if d_embedding is not None:
        de = np.asarray(d_embedding, dtype=np.float64)
        if de.size != d_emb.size:
            raise InvalidInputError("d_embedding shape does not match the embedding")
        d_emb = d_emb + de.reshape(d_emb.shape)

    grads["embed.weight"] = d_emb.T @ trace.stats
    grads["embed.bias"] = d_emb.sum(axis=0)
    d_stats = d_emb @ params["embed.weight"]
    width = trace.mean.shape[1]
    d_mean = d_stats[:, :width]
    d_std = d_stats[:, width:]
    d_var = d_std * 0.5 / trace.std * (trace.var > VAR_FLOOR)
    n_frame = len(trace.frame_act)
    h = trace.frame_act[-1] if n_frame else trace.x
    t = h.shape[1]
    dh = d_mean[:, None, :] / t + d_var[:, None, :] * 2.0 * (h - trace.mean[:, None, :]) / t
    for i in reversed(range(n_frame)):
        dz = dh * (trace.frame_pre[i] > 0)
        a_prev = trace.frame_act[i - 1] if i > 0 else trace.x
        grads[f"frame.{i}.weight"] = np.einsum("btk,btj->kj", dz, a_prev)
        grads[f"frame.{i}.bias"] = dz.sum(axis=(0, 1))
        if i > 0:
            dh = dz @ params[f"frame.{i}.weight"]
    return {name: grads[name] for name in params if name in grads}


# -- checkpoints -------------------------------------------------------------

@dataclass
class Checkpoint:
    params: Params
    config: EncoderConfig
    role: str
    num_classes: Optional[int] = None

    def backbone(self):
        return {k: self.params[k] for k in backbone_shapes(self.config)}


def expected_shapes(cfg, role, num_classes=None):
    shapes = dict(backbone_shapes(cfg))
    if role in ("student", "teacher"):
        shapes.update(head_shapes(cfg))
    if num_classes is not None:
        shapes["classifier.weight"] = (num_classes, cfg.embedding_dim)
    return shapes


def checkpoint_bytes(params, cfg, role, num_classes=None):
    if role not in ROLES:
        raise InvalidRoleError(f"unknown role {role!r}")
    shapes = expected_shapes(cfg, role, num_classes)
    if set(shapes) != set(params):
        raise ShapeMismatchError(
            f"tensor set {sorted(params)} does not match {role} layout {sorted(shapes)}"
        )
    meta = json.dumps({"encoder": asdict(cfg), "num_classes": num_classes},
                      sort_keys=True, separators=(",", ":")).encode("utf-8")
    out = bytearray(CKPT_MAGIC)
    out += struct.pack("<IB", CKPT_VERSION, ROLES[role])
    out += struct.pack("<I", len(meta)) + meta
    out += struct.pack("<I", len(shapes))
    for name in shapes:
        arr = np.asarray(params[name])
        if arr.shape != shapes[name]:
            raise ShapeMismatchError(f"{name}: shape {arr.shape}, expected {shapes[name]}")
        encoded = name.encode("utf-8")
        out += struct.pack("<I", len(encoded)) + encoded
        out += struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    return bytes(out)


def save_checkpoint(path, params, cfg, role, num_classes=None):
    """Serialize parameters as float32. Values are rounded to float32."""
    atomic_write_bytes(path, checkpoint_bytes(params, cfg, role, num_classes))


class _Reader:
    def __init__(self, data, name):
        self.data = data
        self.pos = 0
        self.name = name

    def take(self, n, what):
        if self.pos + n > len(self.data):
            raise TruncatedFileError(f"{self.name}: truncated while reading {what}")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self, what):
        return struct.unpack("<I", self.take(4, what))[0]


def parse_checkpoint(data, name="<bytes>"):
    if len(data) < 4 or data[:4] != CKPT_MAGIC:
        raise MagicMismatchError(f"{name}: not a checkpoint (magic {data[:4]!r})")
    r = _Reader(data, name)
    r.take(4, "magic")
    version = r.u32("version")
    if version != CKPT_VERSION:
        raise VersionMismatchError(f"{name}: unsupported checkpoint version {version}")
    role_byte = r.take(1, "role")[0]
    if role_byte not in ROLE_NAMES:
        raise MalformedHeaderError(f"{name}: unknown role byte {role_byte}")
    role = ROLE_NAMES[role_byte]
    meta_len = r.u32("config length")
    try:
        meta = json.loads(r.take(meta_len, "config").decode("utf-8"))
        cfg = EncoderConfig(**meta["encoder"])
        num_classes = meta.get("num_classes")
    except (ValueError, KeyError, TypeError, ConfigError) as exc:
        raise MalformedHeaderError(f"{name}: bad embedded config ({exc})") from None
    shapes = expected_shapes(cfg, role, num_classes)
    count = r.u32("tensor count")
    if count != len(shapes):
        raise ShapeMismatchError(f"{name}: {count} tensors, config implies {len(shapes)}")
    params = {}
    for _ in range(count):
        tname = r.take(r.u32("name length"), "tensor name").decode("utf-8")
        rank = r.u32("rank")
        dims = struct.unpack(f"<{rank}I", r.take(4 * rank, "dims"))
        if tname not in shapes:
            raise ShapeMismatchError(f"{name}: unexpected tensor {tname!r}")
        if tuple(dims) != shapes[tname]:
            raise ShapeMismatchError(f"{name}: {tname} has shape {dims}, config implies {shapes[tname]}")
        n = int(np.prod(dims)) if rank else 1
        payload = r.take(4 * n, f"tensor {tname}")
        params[tname] = np.frombuffer(payload, dtype="<f4").astype(np.float64).reshape(dims)
    if r.pos != len(data):
        raise MalformedHeaderError(f"{name}: {len(data) - r.pos} trailing bytes")
    ordered = {k: params[k] for k in shapes}
    return Checkpoint(params=ordered, config=cfg, role=role, num_classes=num_classes)


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return parse_checkpoint(fh.read(), str(path))


def round_to_float32(params):
    return {k: np.asarray(v, dtype=np.float32).astype(np.float64) for k, v in params.items()}
