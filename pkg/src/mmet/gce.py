"""Gated condition embedding and the plain feed-forward alternatives.

Each condition group ``k`` of dim ``d_k`` is lifted by its own affine map to
``d_k + 1`` values. A parameter-free gate keeps the lifted block where the
group is present and writes exact zeros where it is absent, so "absent" sits
at the origin while "present with value 0" sits at the (nonzero) bias.
"""

from __future__ import annotations

import math

import numpy as np

from . import backend as B
from .backend import Parameter, Tensor
from .conditions import ConditionSchema, NodeConditions
from .layers import FeedForward, Module

BIAS_INIT = (0.1, 0.5)

EMBEDDINGS = ("gce", "mlp", "mlp_type")


class GroupLift(Module):
    def __init__(self, dim: int, rng: np.random.Generator):
        bound = 1.0 / math.sqrt(dim)
        self.weight = Parameter(rng.uniform(-bound, bound, size=(dim, dim + 1)))
        self.bias = Parameter(rng.uniform(*BIAS_INIT, size=dim + 1))

    def __call__(self, v: Tensor) -> Tensor:
        return B.matmul(v, self.weight) + self.bias


class GatedConditionEmbedding(Module):
    kind = "gce"

    def __init__(self, schema: ConditionSchema, d_emb: int, rng: np.random.Generator):
        self.schema = schema
        self.lifts = [GroupLift(d, rng) for d in schema.dims]
        self.mlp = FeedForward(schema.expanded_width, d_emb, d_emb, rng)

    def gated_blocks(self, blocks, mask) -> list[Tensor]:
        """Lifted and gated blocks, each ``(L, d_k + 1)``."""
        mask = np.asarray(mask, dtype=bool).reshape(-1, len(self.lifts))
        out = []
        for k, (lift, v) in enumerate(zip(self.lifts, blocks)):
            v = B.as_tensor(v)
            if v.ndim == 1:
                v = v.reshape(1, -1)
            gate = mask[:, k : k + 1].astype(v.dtype)
            h = lift(v)
            out.append(h * B.Tensor(gate @ np.ones((1, h.shape[-1]), dtype=v.dtype)))
        return out

    def forward_blocks(self, blocks, mask) -> Tensor:
        return self.mlp(B.concat(self.gated_blocks(blocks, mask), axis=-1))

    def __call__(self, cond: NodeConditions) -> Tensor:
        blocks = [cond.values[n] for n in self.schema.names]
        return self.forward_blocks(blocks, cond.mask())


class PlainConditionEmbedding(Module):
    """Feed-forward embedding of the zero-filled raw vector.

    With ``type_flags`` the presence mask is appended as extra 0/1 inputs,
    which tells the network the boundary type but not via a gated subspace.
    """

    def __init__(self, schema: ConditionSchema, d_emb: int, rng: np.random.Generator, type_flags: bool = False):
        self.schema = schema
        self.type_flags = type_flags
        width = schema.raw_width + (len(schema.groups) if type_flags else 0)
        self.mlp = FeedForward(width, d_emb, d_emb, rng)

    @property
    def kind(self) -> str:
        return "mlp_type" if self.type_flags else "mlp"

    def forward_blocks(self, blocks, mask) -> Tensor:
        parts = [np.atleast_2d(np.asarray(b, dtype=B.default_dtype())) for b in blocks]
        if self.type_flags:
            parts.append(np.atleast_2d(np.asarray(mask, dtype=B.default_dtype())))
        return self.mlp(B.Tensor(np.concatenate(parts, axis=-1)))

    def __call__(self, cond: NodeConditions) -> Tensor:
        blocks = [cond.values[n] for n in self.schema.names]
        return self.forward_blocks(blocks, cond.mask())


def make_condition_embedding(kind: str, schema: ConditionSchema, d_emb: int, rng: np.random.Generator):
    if kind == "gce":
        return GatedConditionEmbedding(schema, d_emb, rng)
    if kind == "mlp":
        return PlainConditionEmbedding(schema, d_emb, rng)
    if kind == "mlp_type":
        return PlainConditionEmbedding(schema, d_emb, rng, type_flags=True)
    raise ValueError(f"unknown embedding kind {kind!r}; expected one of {EMBEDDINGS}")
