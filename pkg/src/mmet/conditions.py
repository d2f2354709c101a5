"""Per-node condition groups (physical parameters, initial and boundary data).

A schema is an ordered list of ``(name, dim)`` groups. Each node carries, per
group, either a value vector of that dim or nothing; the presence flag is what
the gated embedding keys on, so a present zero and an absent value stay
distinguishable.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class SchemaError(ValueError):
    pass


@dataclass(frozen=True)
class ConditionSchema:
    groups: tuple[tuple[str, int], ...]

    def __post_init__(self):
        object.__setattr__(self, "groups", tuple((str(n), int(d)) for n, d in self.groups))
        names = [n for n, _ in self.groups]
        if len(set(names)) != len(names):
            raise SchemaError(f"duplicate group names in {names}")
        for name, dim in self.groups:
            if dim < 1:
                raise SchemaError(f"group {name!r} has dim {dim} < 1")

    @property
    def names(self) -> list[str]:
        return [n for n, _ in self.groups]

    @property
    def dims(self) -> list[int]:
        return [d for _, d in self.groups]

    def dim(self, name: str) -> int:
        return dict(self.groups)[name]

    @property
    def raw_width(self) -> int:
        """Width of the zero-filled concatenation of all group values."""
        return sum(self.dims)

    @property
    def expanded_width(self) -> int:
        """``c_in``: total width after each group is lifted to ``dim + 1``."""
        return sum(d + 1 for d in self.dims)

    def to_json(self) -> list:
        return [[n, d] for n, d in self.groups]

    @classmethod
    def from_json(cls, doc) -> "ConditionSchema":
        return cls(tuple((n, d) for n, d in doc))


@dataclass
class ConditionRecord:
    """Conditions at one node: ``values[name]`` is a vector or ``None``."""

    values: dict = field(default_factory=dict)

    def present(self, name: str) -> bool:
        return self.values.get(name) is not None


def assemble(record: ConditionRecord, schema: ConditionSchema) -> tuple[list[np.ndarray], np.ndarray]:
    """Ordered value blocks (zeros when absent) and the presence mask."""
    unknown = set(record.values) - set(schema.names)
    if unknown:
        raise SchemaError(f"groups not in schema: {sorted(unknown)}")
    blocks, mask = [], []
    for name, dim in schema.groups:
        v = record.values.get(name)
        if v is None:
            blocks.append(np.zeros(dim))
            mask.append(False)
            continue
        v = np.asarray(v, dtype=np.float64).reshape(-1)
        if v.shape != (dim,):
            raise SchemaError(f"group {name!r}: expected dim {dim}, got {v.shape[0]}")
        if not np.isfinite(v).all():
            raise SchemaError(f"group {name!r}: non-finite value")
        blocks.append(v)
        mask.append(True)
    return blocks, np.array(mask, dtype=bool)


class NodeConditions:
    """Column storage of condition records for a whole mesh.

    ``values[name]`` is ``(L, dim)`` with zeros where absent; ``present[name]``
    is a boolean ``(L,)``.
    """

    def __init__(self, schema: ConditionSchema, n_nodes: int):
        self.schema = schema
        self.n_nodes = n_nodes
        self.values = {n: np.zeros((n_nodes, d)) for n, d in schema.groups}
        self.present = {n: np.zeros(n_nodes, dtype=bool) for n, _ in schema.groups}

    def set(self, name: str, nodes, values) -> None:
        """Mark ``nodes`` present for ``name`` with ``values`` (broadcast per row)."""
        dim = self.schema.dim(name)
        nodes = np.atleast_1d(np.asarray(nodes, dtype=np.intp))
        vals = np.asarray(values, dtype=np.float64)
        vals = np.broadcast_to(vals.reshape(-1, dim) if vals.ndim else vals, (len(nodes), dim))
        if not np.isfinite(vals).all():
            raise SchemaError(f"group {name!r}: non-finite value")
        self.values[name][nodes] = vals
        self.present[name][nodes] = True

    def clear(self, name: str, nodes) -> None:
        nodes = np.atleast_1d(np.asarray(nodes, dtype=np.intp))
        self.values[name][nodes] = 0.0
        self.present[name][nodes] = False

    def record(self, i: int) -> ConditionRecord:
        return ConditionRecord(
            {n: self.values[n][i].copy() for n in self.schema.names if self.present[n][i]}
        )

    @classmethod
    def from_records(cls, schema: ConditionSchema, records) -> "NodeConditions":
        records = list(records)
        out = cls(schema, len(records))
        for i, rec in enumerate(records):
            blocks, mask = assemble(rec, schema)
            for (name, _), block, on in zip(schema.groups, blocks, mask):
                if on:
                    out.values[name][i] = block
                    out.present[name][i] = True
        return out

    def mask(self) -> np.ndarray:
        """Presence mask ``(L, n_groups)``."""
        return np.stack([self.present[n] for n in self.schema.names], axis=1)

    def raw(self) -> np.ndarray:
        """Zero-filled concatenation ``(L, raw_width)``."""
        return np.concatenate([self.values[n] for n in self.schema.names], axis=1)

    def permuted(self, perm) -> "NodeConditions":
        out = NodeConditions(self.schema, len(perm))
        for n in self.schema.names:
            out.values[n] = self.values[n][perm].copy()
            out.present[n] = self.present[n][perm].copy()
        return out

    def copy(self) -> "NodeConditions":
        return self.permuted(np.arange(self.n_nodes))


def encode_bc_vector(record: ConditionRecord, normal=None) -> np.ndarray:
    """Single zero-filled thermal boundary vector ``[T, n_x, n_y, dT/dx, dT/dy]``.

    Reads a ``dirichlet`` group ``(T,)`` or a ``neumann`` group holding the
    prescribed gradient ``q * n``. The normal slots stay zero unless
    ``normal`` is given for a Neumann node. This is the ambiguous baseline
    encoding: a zero-flux Neumann node and a ``T = 0`` Dirichlet node both
    give the zero vector.
    """
    out = np.zeros(5)
    d = record.values.get("dirichlet")
    g = record.values.get("neumann")
    if d is not None:
        out[0] = float(np.asarray(d).reshape(-1)[0])
    elif g is not None:
        out[3:5] = np.asarray(g, dtype=np.float64).reshape(-1)[:2]
        if normal is not None:
            out[1:3] = np.asarray(normal, dtype=np.float64).reshape(2)
    return out
