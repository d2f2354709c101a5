"""Mesh encoder / query decoder transformer.

Mesh nodes are embedded (coordinate encoding + condition embedding), sorted
along a Hilbert curve, grouped into fixed-size patches and projected to one
token per patch. The encoder runs self-attention over those tokens. Query
points are tokens of their own and only cross-attend to the encoder memory,
so each query's output depends on (query, memory, parameters) alone.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import backend as B
from .backend import Tensor
from .conditions import ConditionSchema
from .gce import EMBEDDINGS, make_condition_embedding
from .geometry import DEFAULT_ORDER, Mesh, SerializationPlan, normalize_coords, reserialize
from .layers import FeedForward, LayerNorm, Linear, Module, Wavelet

ATTENTION_KINDS = ("dot", "linear")
ATTENTION_CHUNK = 1024  # query rows per untaped score block


@dataclass
class ModelConfig:
    d_emb: int = 16
    patch_size: int = 4
    order: int = DEFAULT_ORDER
    d_model: int = 32
    n_encoder: int = 2
    n_decoder: int = 2
    n_head: int = 1
    attention: str = "dot"
    out_dim: int = 1
    encoder_only: bool = False
    embedding: str = "gce"
    d_ff: int | None = None
    coord_dim: int = 2
    output_scale: list | None = None

    def __post_init__(self):
        if self.d_model % self.n_head:
            raise ValueError(f"d_model={self.d_model} not divisible by n_head={self.n_head}")
        if self.attention not in ATTENTION_KINDS:
            raise ValueError(f"unknown attention kind {self.attention!r}")
        if self.embedding not in EMBEDDINGS:
            raise ValueError(f"unknown embedding kind {self.embedding!r}")
        if self.patch_size < 1:
            raise ValueError("patch_size must be >= 1")
        if self.output_scale is not None:
            self.output_scale = [float(s) for s in self.output_scale]
            if len(self.output_scale) != self.out_dim:
                raise ValueError("output_scale length must equal out_dim")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise KeyError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**doc)


# Reference hyperparameters per benchmark.
PRESETS = {
    "poisson": dict(d_emb=16, patch_size=4, order=16, d_model=32, n_encoder=2, n_decoder=2, n_head=1),
    "darcy": dict(d_emb=32, patch_size=2, order=16, d_model=128, n_encoder=2, n_decoder=2, n_head=2),
    "shapenet_car": dict(d_emb=32, patch_size=2, order=16, d_model=128, n_encoder=2, n_decoder=2, n_head=2),
    "heat2d": dict(d_emb=32, patch_size=1, order=16, d_model=192, n_encoder=2, n_decoder=2, n_head=3),
    "beam2d": dict(d_emb=32, patch_size=128, order=16, d_model=128, n_encoder=2, n_decoder=2, n_head=2),
    "heatsink2d": dict(d_emb=32, patch_size=64, order=16, d_model=128, n_encoder=2, n_decoder=2, n_head=2),
}
ENCODER_ONLY_PRESETS = {
    "poisson": dict(d_emb=16, patch_size=4, order=16, d_model=32, n_encoder=4, n_head=1),
    "darcy": dict(d_emb=32, patch_size=2, order=16, d_model=128, n_encoder=4, n_head=2),
    "shapenet_car": dict(d_emb=32, patch_size=2, order=16, d_model=128, n_encoder=4, n_head=2),
    "heat2d": dict(d_emb=32, patch_size=1, order=16, d_model=192, n_encoder=4, n_head=3),
}


def preset(name: str, encoder_only: bool = False, **overrides) -> ModelConfig:
    table = ENCODER_ONLY_PRESETS if encoder_only else PRESETS
    if name not in table:
        raise KeyError(f"no preset for {name!r}")
    row = dict(table[name])
    if encoder_only:
        row.update(encoder_only=True, n_decoder=0)
    row.update(overrides)
    return ModelConfig(**row)


def wavelet(x, w1, w2) -> Tensor:
    """``w1 * sin(x) + w2 * cos(x)``, elementwise."""
    return B.as_tensor(w1) * B.sin(x) + B.as_tensor(w2) * B.cos(x)


def attention(q: Tensor, k: Tensor, v: Tensor, kind: str = "dot", return_weights: bool = False):
    """Attention over head-split tensors ``q: (h, M, dh)``, ``k, v: (h, T, dh)``.

    ``dot`` is scaled softmax attention. ``linear`` applies a softmax feature
    map to queries and keys over the feature axis and normalizes each query's
    kernel weights to sum to one; memory cost is linear in ``T``.
    """
    dh = q.shape[-1]
    if kind == "dot" and not return_weights and not B.is_recording() and q.shape[1] > ATTENTION_CHUNK:
        # untaped: bound the score buffer; rows are independent so chunking is exact
        parts = [
            attention(B.Tensor(q.data[:, i : i + ATTENTION_CHUNK]), k, v, kind).data
            for i in range(0, q.shape[1], ATTENTION_CHUNK)
        ]
        return B.Tensor(np.concatenate(parts, axis=1))
    if kind == "dot":
        scores = B.matmul(q, k.transpose(0, 2, 1)) * (1.0 / math.sqrt(dh))
        w = B.softmax(scores, axis=-1)
        out = B.matmul(w, v)
        return (out, w.data) if return_weights else out
    if kind == "linear":
        qf = B.softmax(q, axis=-1)
        kf = B.softmax(k, axis=-1)
        context = B.matmul(kf.transpose(0, 2, 1), v)  # (h, dh, dh)
        num = B.matmul(qf, context)
        ksum = kf.sum(axis=1, keepdims=True).transpose(0, 2, 1)  # (h, dh, 1)
        den = B.matmul(qf, ksum)  # (h, M, 1)
        ones = np.ones((1, v.shape[-1]), dtype=v.dtype)
        out = num / B.matmul(den, ones)
        if return_weights:
            raw = qf.data @ np.swapaxes(kf.data, -1, -2)
            return out, raw / den.data
        return out
    raise ValueError(f"unknown attention kind {kind!r}")


class MultiHeadAttention(Module):
    def __init__(self, d_model: int, n_head: int, kind: str, rng: np.random.Generator):
        self.n_head, self.kind = n_head, kind
        self.wq = Linear(d_model, d_model, rng)
        # a key bias only shifts every score of a query equally
        self.wk = Linear(d_model, d_model, rng, bias=kind != "dot")
        self.wv = Linear(d_model, d_model, rng)
        self.wo = Linear(d_model, d_model, rng)

    def _split(self, x: Tensor) -> Tensor:
        n, d = x.shape
        return x.reshape(n, self.n_head, d // self.n_head).transpose(1, 0, 2)

    def __call__(self, xq: Tensor, xkv: Tensor, return_weights: bool = False):
        q, k, v = self._split(self.wq(xq)), self._split(self.wk(xkv)), self._split(self.wv(xkv))
        res = attention(q, k, v, self.kind, return_weights)
        out, w = res if return_weights else (res, None)
        m = xq.shape[0]
        merged = out.transpose(1, 0, 2).reshape(m, -1)
        y = self.wo(merged)
        return (y, w) if return_weights else y


class EncoderBlock(Module):
    """Pre-norm self-attention + feed-forward, wavelet activations."""

    activation = "wavelet"

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        d_ff = cfg.d_ff or cfg.d_model
        self.ln1 = LayerNorm(cfg.d_model)
        self.attn = MultiHeadAttention(cfg.d_model, cfg.n_head, cfg.attention, rng)
        self.ln2 = LayerNorm(cfg.d_model)
        self.ff = FeedForward(cfg.d_model, d_ff, cfg.d_model, rng)

    def __call__(self, x: Tensor) -> Tensor:
        h = self.ln1(x)
        x = x + self.attn(h, h)
        return x + self.ff(self.ln2(x))

    def activations(self) -> list:
        return self.ff.activations()


class DecoderBlock(Module):
    """Pre-norm cross-attention + feed-forward; no self-attention over queries."""

    activation = "wavelet"

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        d_ff = cfg.d_ff or cfg.d_model
        self.ln_q = LayerNorm(cfg.d_model)
        self.ln_kv = LayerNorm(cfg.d_model)
        self.attn = MultiHeadAttention(cfg.d_model, cfg.n_head, cfg.attention, rng)
        self.ln2 = LayerNorm(cfg.d_model)
        self.ff = FeedForward(cfg.d_model, d_ff, cfg.d_model, rng)

    def __call__(self, y: Tensor, memory: Tensor, return_weights: bool = False):
        res = self.attn(self.ln_q(y), self.ln_kv(memory), return_weights)
        a, w = res if return_weights else (res, None)
        y = y + a
        y = y + self.ff(self.ln2(y))
        return (y, w) if return_weights else y

    def activations(self) -> list:
        return self.ff.activations()


class MMET(Module):
    def __init__(self, cfg: ModelConfig, schema: ConditionSchema | None = None, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.schema = schema
        self.posenc = FeedForward(cfg.coord_dim, cfg.d_emb, cfg.d_emb, rng)
        self.cond_embed = make_condition_embedding(cfg.embedding, schema, cfg.d_emb, rng) if schema else None
        self.patch_proj = Linear(cfg.patch_size * cfg.d_emb, cfg.d_model, rng)
        self.encoder = [EncoderBlock(cfg, rng) for _ in range(cfg.n_encoder)]
        self.enc_norm = LayerNorm(cfg.d_model)
        if cfg.encoder_only:
            self.unpatch = Linear(cfg.d_model, cfg.patch_size * cfg.d_model, rng)
        else:
            self.query_proj = Linear(cfg.d_emb, cfg.d_model, rng)
            self.decoder = [DecoderBlock(cfg, rng) for _ in range(cfg.n_decoder)]
            self.dec_norm = LayerNorm(cfg.d_model)
        self.head = FeedForward(cfg.d_model, cfg.d_model, cfg.out_dim, rng)
        self.parameters()  # assign names

    # -- pieces -------------------------------------------------------------

    def positional_encode(self, coords) -> Tensor:
        """Coordinates already normalized to the bbox square."""
        x = B.as_tensor(coords)
        if x.ndim == 1:
            x = x.reshape(1, -1)
        return self.posenc(x)

    def embed_nodes(self, mesh: Mesh) -> Tensor:
        emb = self.positional_encode(mesh.normalize(mesh.nodes))
        if self.cond_embed is not None:
            if mesh.conditions is None:
                raise ValueError("model expects node conditions but mesh has none")
            if mesh.conditions.schema != self.schema:
                raise ValueError("mesh condition schema does not match the model")
            emb = emb + self.cond_embed(mesh.conditions)
        return emb

    def plan(self, mesh: Mesh) -> SerializationPlan:
        return reserialize(mesh, self.cfg.order, self.cfg.patch_size)

    def tokens(self, mesh: Mesh, plan: SerializationPlan | None = None) -> Tensor:
        plan = plan or self.plan(mesh)
        emb = B.take(self.embed_nodes(mesh), plan.perm, axis=0)
        p, pad = self.cfg.patch_size, plan.pad_count
        if pad:
            emb = B.concat([emb, B.Tensor(np.zeros((pad, emb.shape[1]), dtype=emb.dtype))], axis=0)
        return self.patch_proj(emb.reshape(plan.n_tokens, p * self.cfg.d_emb))

    def encode(self, mesh: Mesh, plan: SerializationPlan | None = None) -> Tensor:
        x = self.tokens(mesh, plan)
        for blk in self.encoder:
            x = blk(x)
        return self.enc_norm(x)

    def query_tokens(self, queries, bbox) -> Tensor:
        q = normalize_coords(np.asarray(queries, dtype=np.float64).reshape(-1, self.cfg.coord_dim), bbox)
        return self.query_proj(self.positional_encode(q.astype(B.default_dtype())))

    def decode(self, queries, memory: Tensor, bbox, return_attention: bool = False):
        if self.cfg.encoder_only:
            raise RuntimeError("encoder-only model has no query decoder")
        y = self.query_tokens(queries, bbox)
        weights = []
        for blk in self.decoder:
            if return_attention:
                y, w = blk(y, memory, True)
                weights.append(w)
            else:
                y = blk(y, memory)
        out = self._head(self.dec_norm(y))
        return (out, weights) if return_attention else out

    def _head(self, h: Tensor) -> Tensor:
        out = self.head(h)
        if self.cfg.output_scale is not None:
            out = out * B.Tensor(np.asarray(self.cfg.output_scale, dtype=out.dtype))
        return out

    def node_outputs(self, mesh: Mesh, plan: SerializationPlan | None = None) -> Tensor:
        """Encoder-only path: one prediction per mesh node, in input order."""
        plan = plan or self.plan(mesh)
        mem = self.encode(mesh, plan)
        d = self.cfg.d_model
        h = self.unpatch(mem).reshape(plan.n_tokens * self.cfg.patch_size, d)
        inverse = np.empty_like(plan.perm)
        inverse[plan.perm] = np.arange(len(plan.perm))
        return self._head(B.take(h, inverse, axis=0))

    def __call__(self, mesh: Mesh, queries=None) -> Tensor:
        if self.cfg.encoder_only:
            return self.node_outputs(mesh)
        return self.decode(queries, self.encode(mesh), mesh.bbox)

    def predict(self, mesh: Mesh, queries=None, batch_size: int | None = None) -> np.ndarray:
        """Untaped evaluation; queries may be split into batches."""
        with B.no_grad():
            if self.cfg.encoder_only:
                return self.node_outputs(mesh).data
            memory = self.encode(mesh)
            queries = np.asarray(queries, dtype=np.float64).reshape(-1, self.cfg.coord_dim)
            if not batch_size:
                return self.decode(queries, memory, mesh.bbox).data
            parts = [
                self.decode(queries[i : i + batch_size], memory, mesh.bbox).data
                for i in range(0, len(queries), batch_size)
            ]
            return np.concatenate(parts, axis=0)

    def wavelets(self) -> list:
        acts = [self.posenc.act, self.head.act]
        if self.cond_embed is not None:
            acts.append(self.cond_embed.mlp.act)
        for blk in self.encoder + getattr(self, "decoder", []):
            acts.extend(blk.activations())
        return acts


def model_checkpoint_meta(model: MMET, **extra) -> dict:
    meta = {"model": model.cfg.to_dict(), "schema": model.schema.to_json() if model.schema else None}
    meta.update(extra)
    return meta


def save_model(model: MMET, path, **extra) -> None:
    B.save_checkpoint(path, model.state_dict(), model_checkpoint_meta(model, **extra))


def load_model(path) -> tuple[MMET, dict]:
    params, meta = B.load_checkpoint(path)
    cfg = ModelConfig.from_dict(meta["model"])
    schema = ConditionSchema.from_json(meta["schema"]) if meta.get("schema") else None
    model = MMET(cfg, schema)
    model.load_state_dict(params)
    return model, meta
