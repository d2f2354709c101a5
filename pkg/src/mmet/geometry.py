"""Meshes, Hilbert-curve reserialization and fixed-size patch planning.

The curve is the usual rotate/reflect construction starting at cell (0, 0);
the coarsest quadrant digit is the most significant base-4 digit of the code.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .conditions import ConditionSchema, NodeConditions

DEFAULT_ORDER = 16
MAX_ORDER = 31


class MeshError(ValueError):
    pass


def bounding_box(nodes: np.ndarray) -> np.ndarray:
    nodes = np.asarray(nodes, dtype=np.float64)
    return np.stack([nodes.min(axis=0), nodes.max(axis=0)])


@dataclass
class Mesh:
    nodes: np.ndarray
    conditions: NodeConditions | None = None
    bbox: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.nodes = np.asarray(self.nodes, dtype=np.float64)
        if self.nodes.ndim != 2 or self.nodes.shape[1] != 2:
            raise MeshError(f"nodes must be (L, 2), got {self.nodes.shape}")
        if len(self.nodes) < 1:
            raise MeshError("mesh has no nodes")
        if not np.isfinite(self.nodes).all():
            raise MeshError("non-finite node coordinates")
        if self.bbox is None:
            self.bbox = bounding_box(self.nodes)
        self.bbox = np.asarray(self.bbox, dtype=np.float64).reshape(2, 2)
        if (self.nodes < self.bbox[0]).any() or (self.nodes > self.bbox[1]).any():
            raise MeshError("node outside bbox")
        if self.conditions is not None and self.conditions.n_nodes != len(self.nodes):
            raise MeshError("conditions do not match node count")

    def __len__(self):
        return len(self.nodes)

    def permuted(self, perm) -> "Mesh":
        perm = np.asarray(perm)
        cond = self.conditions.permuted(perm) if self.conditions is not None else None
        return Mesh(self.nodes[perm], cond, self.bbox.copy(), dict(self.meta))

    def normalize(self, points) -> np.ndarray:
        """Affine map of the bbox onto ``[-1, 1]^2`` (degenerate axes map to 0)."""
        return normalize_coords(points, self.bbox)


def normalize_coords(points, bbox) -> np.ndarray:
    points = np.asarray(points, dtype=np.float64)
    lo, hi = bbox
    ext = hi - lo
    safe = np.where(ext > 0, ext, 1.0)
    out = 2.0 * (points - lo) / safe - 1.0
    return np.where(ext > 0, out, 0.0)


def quantize(point, bbox, order: int) -> tuple[int, int]:
    """Grid cell of ``point`` in the ``2^order`` discretization of ``bbox``."""
    u, v = quantize_points(np.asarray(point, dtype=np.float64).reshape(1, 2), bbox, order)[0]
    return int(u), int(v)


def quantize_points(points, bbox, order: int) -> np.ndarray:
    if not 1 <= order <= MAX_ORDER:
        raise ValueError(f"order must be in [1, {MAX_ORDER}], got {order}")
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    lo, hi = np.asarray(bbox, dtype=np.float64).reshape(2, 2)
    if (points < lo).any() or (points > hi).any():
        raise MeshError("point outside bbox")
    side = 1 << order
    ext = hi - lo
    safe = np.where(ext > 0, ext, 1.0)
    cells = np.floor((points - lo) / safe * side)
    cells = np.where(ext > 0, cells, 0.0)
    return np.minimum(cells, side - 1).astype(np.int64)


def _check_cells(u, v, order):
    if not 1 <= order <= MAX_ORDER:
        raise ValueError(f"order must be in [1, {MAX_ORDER}], got {order}")
    side = 1 << order
    if (np.min(u) < 0) or (np.min(v) < 0) or (np.max(u) >= side) or (np.max(v) >= side):
        raise ValueError(f"cell outside [0, {side}) at order {order}")


def hilbert_index(u: int, v: int, order: int) -> int:
    """Position of cell ``(u, v)`` along the order-``order`` Hilbert curve."""
    _check_cells([u], [v], order)
    return int(kernels.hilbert_encode([u], [v], order)[0])


def hilbert_codes(cells: np.ndarray, order: int) -> np.ndarray:
    cells = np.asarray(cells, dtype=np.int64).reshape(-1, 2)
    if len(cells):
        _check_cells(cells[:, 0], cells[:, 1], order)
    return kernels.hilbert_encode(cells[:, 0], cells[:, 1], order)


def hilbert_inverse(e: int, order: int) -> tuple[int, int]:
    if not 1 <= order <= MAX_ORDER:
        raise ValueError(f"order must be in [1, {MAX_ORDER}], got {order}")
    if not 0 <= e < 4**order:
        raise ValueError(f"code {e} outside [0, 4^{order})")
    u, v = kernels.hilbert_decode([e], order)
    return int(u[0]), int(v[0])


def hilbert_digits(u: int, v: int, order: int) -> list[int]:
    """Quadrant digits ``b_i`` (``b_0`` finest) of a cell's code."""
    e = hilbert_index(u, v, order)
    return [(e >> (2 * i)) & 3 for i in range(order)]


def combine_digits(digits) -> int:
    return sum(int(b) << (2 * i) for i, b in enumerate(digits))


@dataclass
class SerializationPlan:
    order: int
    codes: np.ndarray
    perm: np.ndarray
    patch_size: int
    patches: list

    @property
    def n_tokens(self) -> int:
        return len(self.patches)

    @property
    def pad_count(self) -> int:
        return self.patches[-1][2] if self.patches else 0


def make_patches(length: int, patch_size: int) -> list[tuple[int, int, int]]:
    """``(start, end, pad_count)`` for consecutive runs of ``patch_size``."""
    if length < 1 or patch_size < 1:
        raise ValueError("length and patch_size must be >= 1")
    out = []
    for start in range(0, length, patch_size):
        end = min(start + patch_size, length)
        out.append((start, end, patch_size - (end - start)))
    return out


def token_count(length: int, patch_size: int) -> int:
    return math.ceil(length / patch_size)


def reserialize(mesh_or_nodes, order: int = DEFAULT_ORDER, patch_size: int = 1, bbox=None) -> SerializationPlan:
    """Sort nodes by Hilbert code (ties by input index) and plan patches."""
    if isinstance(mesh_or_nodes, Mesh):
        nodes, bbox = mesh_or_nodes.nodes, mesh_or_nodes.bbox
    else:
        nodes = np.asarray(mesh_or_nodes, dtype=np.float64).reshape(-1, 2)
        bbox = bounding_box(nodes) if bbox is None else bbox
    codes = hilbert_codes(quantize_points(nodes, bbox, order), order)
    perm = np.argsort(codes, kind="stable")
    return SerializationPlan(order, codes, perm, patch_size, make_patches(len(nodes), patch_size))


# -- file formats ------------------------------------------------------------

def mesh_to_json(mesh: Mesh) -> dict:
    doc = {"nodes": mesh.nodes.tolist(), "bbox": mesh.bbox.tolist(), "groups": {}}
    if mesh.conditions is not None:
        for name, dim in mesh.conditions.schema.groups:
            idx = np.flatnonzero(mesh.conditions.present[name])
            doc["groups"][name] = {
                "dim": dim,
                "values": {str(i): mesh.conditions.values[name][i].tolist() for i in idx},
            }
    if mesh.meta:
        doc["meta"] = mesh.meta
    return doc


def mesh_from_json(doc: dict) -> Mesh:
    nodes = np.asarray(doc["nodes"], dtype=np.float64)
    groups = doc.get("groups") or {}
    cond = None
    if groups:
        schema = ConditionSchema(tuple((name, g["dim"]) for name, g in groups.items()))
        cond = NodeConditions(schema, len(nodes))
        for name, g in groups.items():
            for key, vec in g["values"].items():
                i = int(key)
                if not 0 <= i < len(nodes):
                    raise MeshError(f"group {name!r}: node index {i} out of range")
                cond.set(name, [i], vec)
    return Mesh(nodes, cond, doc.get("bbox"), doc.get("meta", {}))


def save_mesh(mesh: Mesh, path) -> None:
    Path(path).write_text(json.dumps(mesh_to_json(mesh), separators=(",", ":")))


def load_mesh(path, schema: ConditionSchema | None = None) -> Mesh:
    """Read a mesh JSON file or a CSV node list.

    CSV columns are ``x, y`` then condition columns named ``group`` (dim 1) or
    ``group.0, group.1, ...``; a blank cell means the group is absent at that
    node. ``schema`` fixes group order and dims for CSV input.
    """
    path = Path(path)
    if path.suffix.lower() == ".csv":
        return _load_mesh_csv(path, schema)
    mesh = mesh_from_json(json.loads(path.read_text()))
    if schema is not None and mesh.conditions is not None:
        mesh.conditions = _conform(mesh.conditions, schema)
    return mesh


def _conform(cond: NodeConditions, schema: ConditionSchema) -> NodeConditions:
    out = NodeConditions(schema, cond.n_nodes)
    for name, dim in cond.schema.groups:
        if name not in schema.names:
            raise MeshError(f"mesh group {name!r} not in schema")
        if schema.dim(name) != dim:
            raise MeshError(f"group {name!r}: mesh dim {dim} != schema dim {schema.dim(name)}")
        out.values[name] = cond.values[name].copy()
        out.present[name] = cond.present[name].copy()
    return out


def _load_mesh_csv(path: Path, schema: ConditionSchema | None) -> Mesh:
    with path.open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise MeshError(f"{path}: empty node list")
    nodes = np.array([[float(r["x"]), float(r["y"])] for r in rows])
    columns = [c for c in rows[0].keys() if c not in ("x", "y")]
    if schema is None:
        dims: dict[str, int] = {}
        for c in columns:
            base = c.split(".")[0]
            dims[base] = dims.get(base, 0) + 1
        schema = ConditionSchema(tuple(dims.items())) if dims else None
    cond = None
    if schema is not None:
        cond = NodeConditions(schema, len(nodes))
        for name, dim in schema.groups:
            cols = [name] if dim == 1 and name in columns else [f"{name}.{k}" for k in range(dim)]
            for i, r in enumerate(rows):
                cells = [r.get(c, "") for c in cols]
                if all(s.strip() == "" for s in cells):
                    continue
                cond.set(name, [i], [float(s) for s in cells])
    return Mesh(nodes, cond)


# -- domains and problem instances ------------------------------------------

@dataclass(frozen=True)
class RectUnion:
    """Closed union of axis-aligned rectangles ``(x0, y0, x1, y1)``."""

    rects: tuple

    def contains(self, points, tol: float = 1e-12) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        inside = np.zeros(len(p), dtype=bool)
        for x0, y0, x1, y1 in self.rects:
            inside |= (
                (p[:, 0] >= x0 - tol) & (p[:, 0] <= x1 + tol) & (p[:, 1] >= y0 - tol) & (p[:, 1] <= y1 + tol)
            )
        return inside

    @property
    def bbox(self) -> np.ndarray:
        r = np.asarray(self.rects, dtype=np.float64)
        return np.array([[r[:, 0].min(), r[:, 1].min()], [r[:, 2].max(), r[:, 3].max()]])

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """Uniform samples by area."""
        r = np.asarray(self.rects, dtype=np.float64)
        area = (r[:, 2] - r[:, 0]) * (r[:, 3] - r[:, 1])
        which = rng.choice(len(r), size=n, p=area / area.sum())
        lo, hi = r[which, :2], r[which, 2:]
        return lo + rng.uniform(size=(n, 2)) * (hi - lo)


def rectangle(x0, y0, x1, y1) -> RectUnion:
    return RectUnion(((float(x0), float(y0), float(x1), float(y1)),))


@dataclass
class PDEInstance:
    """One problem: encoder mesh, query points and optional reference field.

    ``extra`` holds benchmark-specific samples (source values, boundary points,
    normals, ...), ``params`` the scalar parameters that generated it.
    """

    mesh: Mesh
    queries: np.ndarray
    labels: np.ndarray | None = None
    fields: tuple = ()
    domain: RectUnion | None = None
    params: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)
