"""Dataset generators and analytic oracles.

Poisson on the unit square, the Euler-Bernoulli cantilever (Beam2d), a finned
heat sink (Heatsink2d) and the Dirichlet/Neumann ambiguity set built on the
heat-sink geometry. Every generator is a pure function of (spec, seed).
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .conditions import ConditionSchema, NodeConditions
from .geometry import Mesh, PDEInstance, RectUnion, mesh_to_json, rectangle

BENCHMARKS = ("poisson", "beam2d", "heatsink2d", "ambiguity")


class DomainError(ValueError):
    pass


def _xy(x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    return np.broadcast_arrays(x, y)


# -- Poisson ----------------------------------------------------------------

POISSON_SCHEMA = ConditionSchema((("source", 1), ("dirichlet", 1)))
POISSON_DOMAIN = rectangle(0.0, 0.0, 1.0, 1.0)


def poisson_oracle(x, y):
    """``(u_true, f)`` with ``u = sin(pi x) sin(pi y)`` and ``f = -2 pi^2 u``."""
    x, y = _xy(x, y)
    if (x < 0).any() or (x > 1).any() or (y < 0).any() or (y > 1).any():
        raise DomainError("point outside the unit square")
    u = np.sin(np.pi * x) * np.sin(np.pi * y)
    return u, -2.0 * np.pi**2 * u


def unit_grid(n: int) -> np.ndarray:
    """Inclusive ``n x n`` grid on the unit square, x varying fastest."""
    t = np.linspace(0.0, 1.0, n)
    gx, gy = np.meshgrid(t, t)
    return np.column_stack([gx.ravel(), gy.ravel()])


def poisson_grids(n_train: int = 50, n_test: int = 100) -> tuple[np.ndarray, np.ndarray]:
    return unit_grid(n_train), unit_grid(n_test)


def poisson_mesh(n: int = 50) -> Mesh:
    nodes = unit_grid(n)
    _, f = poisson_oracle(nodes[:, 0], nodes[:, 1])
    cond = NodeConditions(POISSON_SCHEMA, len(nodes))
    cond.set("source", np.arange(len(nodes)), f.reshape(-1, 1))
    on_edge = ((nodes == 0) | (nodes == 1)).any(axis=1)
    cond.set("dirichlet", np.flatnonzero(on_edge), 0.0)
    return Mesh(nodes, cond, np.array([[0.0, 0.0], [1.0, 1.0]]), {"benchmark": "poisson"})


def poisson_instance(queries=None, mesh_n: int = 50) -> PDEInstance:
    """Train instance on the mesh grid by default; pass the test grid to evaluate."""
    mesh = poisson_mesh(mesh_n)
    q = mesh.nodes.copy() if queries is None else np.asarray(queries, dtype=np.float64)
    u, f = poisson_oracle(q[:, 0], q[:, 1])
    interior = ((q > 0) & (q < 1)).all(axis=1)
    return PDEInstance(
        mesh, q, u.reshape(-1, 1), ("u",), POISSON_DOMAIN, {}, {"source": f, "interior": interior}
    )


# -- Beam2d -----------------------------------------------------------------

BEAM_SCHEMA = ConditionSchema((("material", 2), ("dirichlet", 2), ("neumann", 4)))
BEAM_FIELDS = ("u", "v", "sigma_x", "sigma_y", "tau_xy")
BEAM_MESH_SHAPE = (193, 28)  # 5404 nodes


def lame_constants(E: float, nu: float) -> tuple[float, float]:
    """``(mu, lambda)``."""
    if nu == 0.5 or nu == -1.0:
        raise ValueError(f"Lame constants are singular at nu={nu}")
    mu = E / (2.0 * (1.0 + nu))
    lam = E * nu / ((1.0 + nu) * (1.0 - 2.0 * nu))
    return mu, lam


@dataclass(frozen=True)
class BeamSpec:
    L: float = 5.0
    H: float = 1.0
    E: float = 20.0
    nu: float = 0.3
    M: float = 1.0
    B: float = 1.0

    def __post_init__(self):
        if self.H <= 0 or self.L <= 0 or self.B <= 0:
            raise ValueError("beam dimensions must be positive")
        if not 0.0 < self.nu < 0.5:
            raise ValueError("Poisson ratio must lie in (0, 0.5)")

    @property
    def domain(self) -> RectUnion:
        return rectangle(0.0, -self.H / 2, self.L, self.H / 2)


def beam_oracle(x, y, spec: BeamSpec = BeamSpec()) -> np.ndarray:
    """Columns ``u, v, sigma_x, sigma_y, tau_xy, sigma_v`` for pure bending.

    The beam occupies ``[0, L] x [-H/2, H/2]`` with ``y`` measured from the
    neutral axis.
    """
    x, y = _xy(x, y)
    tol = 1e-12
    if (x < -tol).any() or (x > spec.L + tol).any() or (np.abs(y) > spec.H / 2 + tol).any():
        raise DomainError("point outside the beam")
    mu, lam = lame_constants(spec.E, spec.nu)
    M, L, H = spec.M, spec.L, spec.H
    u = 3 * M * (2 * mu + lam) / (mu * (mu + lam) * L * H**3) * x * y
    v = -3 * M / (2 * mu * (mu + lam) * L * H**3) * ((2 * mu + lam) * x**2 + lam * y**2)
    sx = 12 * M / (spec.B * H**3) * y
    sy = np.zeros_like(sx)
    txy = np.zeros_like(sx)
    return np.stack([u, v, sx, sy, txy, von_mises(sx, sy, txy)], axis=-1)


def von_mises(sx, sy, txy) -> np.ndarray:
    return np.sqrt(sx**2 + sy**2 - sx * sy + 3 * txy**2)


def beam_nodes(spec: BeamSpec = BeamSpec(), shape=BEAM_MESH_SHAPE) -> np.ndarray:
    nx, ny = shape
    gx, gy = np.meshgrid(np.linspace(0, spec.L, nx), np.linspace(-spec.H / 2, spec.H / 2, ny))
    return np.column_stack([gx.ravel(), gy.ravel()])


def beam_mesh(spec: BeamSpec, nodes=None) -> Mesh:
    """Clamped at ``x = 0`` (oracle displacements), end moment as the linear
    traction ``t_x = 12 M y / (B H^3)`` at ``x = L``, traction-free top/bottom."""
    nodes = beam_nodes(spec) if nodes is None else np.asarray(nodes, dtype=np.float64)
    x, y = nodes[:, 0], nodes[:, 1]
    tol = 1e-9
    cond = NodeConditions(BEAM_SCHEMA, len(nodes))
    cond.set("material", np.arange(len(nodes)), [spec.E, spec.nu])
    left = np.flatnonzero(x < tol)
    cond.set("dirichlet", left, beam_oracle(x[left], y[left], spec)[:, :2])
    right = np.flatnonzero(x > spec.L - tol)
    t = 12 * spec.M / (spec.B * spec.H**3) * y[right]
    cond.set("neumann", right, np.column_stack([t, 0 * t, 1 + 0 * t, 0 * t]))
    for sign in (1.0, -1.0):
        edge = np.flatnonzero((np.abs(y - sign * spec.H / 2) < tol) & (x > tol) & (x < spec.L - tol))
        cond.set("neumann", edge, [0.0, 0.0, 0.0, sign])
    bbox = np.array([[0.0, -spec.H / 2], [spec.L, spec.H / 2]])
    return Mesh(nodes, cond, bbox, {"benchmark": "beam2d", "M": spec.M})


def beam_instance(spec: BeamSpec, points, nodes=None) -> PDEInstance:
    points = np.asarray(points, dtype=np.float64)
    labels = beam_oracle(points[:, 0], points[:, 1], spec)[:, :5]
    return PDEInstance(beam_mesh(spec, nodes), points, labels, BEAM_FIELDS, spec.domain, asdict(spec))


@dataclass
class BeamDataset:
    """Moments and sample points; meshes are built on demand."""

    base: BeamSpec
    moments: np.ndarray
    points: list
    nodes: np.ndarray

    def __len__(self):
        return len(self.moments)

    def spec(self, i: int) -> BeamSpec:
        return BeamSpec(**{**asdict(self.base), "M": float(self.moments[i])})

    def instance(self, i: int) -> PDEInstance:
        return beam_instance(self.spec(i), self.points[i], self.nodes)

    def __iter__(self):
        return (self.instance(i) for i in range(len(self)))


def beam_dataset(
    seed: int,
    n_train: int = 1000,
    n_train_points: int = 1000,
    n_test: int = 100,
    n_test_points: int = 5000,
    m_range=(0.5, 1.5),
    spec: BeamSpec = BeamSpec(),
    nodes=None,
) -> tuple[BeamDataset, BeamDataset]:
    """Train and test splits with uniform moments and uniform random points."""
    rng = np.random.default_rng(seed)
    nodes = beam_nodes(spec) if nodes is None else np.asarray(nodes, dtype=np.float64)
    lo = np.array([0.0, -spec.H / 2])
    size = np.array([spec.L, spec.H])

    def split(n, k):
        moments = rng.uniform(*m_range, size=n)
        pts = [lo + rng.uniform(size=(k, 2)) * size for _ in range(n)]
        return BeamDataset(spec, moments, pts, nodes)

    return split(n_train, n_train_points), split(n_test, n_test_points)


def beam_resolution_points(spec: BeamSpec, shape) -> np.ndarray:
    """Inclusive ``nx x ny`` grid over the beam."""
    return beam_nodes(spec, shape)


# -- Heatsink2d -------------------------------------------------------------

HEAT_SCHEMA = ConditionSchema((("dirichlet", 1), ("neumann", 2)))


@dataclass(frozen=True)
class HeatsinkSpec:
    """Base plate ``[0, width] x [0, base]`` with ``n_fins`` fins of width
    ``fin_width`` centred in equal pitches, reaching up to ``H``."""

    width: float = 5.0
    base: float = 0.5
    n_fins: int = 4
    fin_width: float = 0.5
    t_top: float = 0.0
    h_range: tuple = (1.5, 2.5)
    a_range: tuple = (0.5, 1.5)
    mesh_step: float = 0.125

    def fins(self) -> list[tuple[float, float]]:
        pitch = self.width / self.n_fins
        return [
            (pitch * (i + 0.5) - self.fin_width / 2, pitch * (i + 0.5) + self.fin_width / 2)
            for i in range(self.n_fins)
        ]

    def domain(self, H: float) -> RectUnion:
        if H <= self.base:
            raise DomainError(f"fin height {H} must exceed the base {self.base}")
        fins = self.fins()
        if fins[0][0] < 0 or any(b[0] <= a[1] for a, b in zip(fins, fins[1:])):
            raise DomainError("fins overlap or leave the base")
        return RectUnion(((0.0, 0.0, self.width, self.base), *((x0, self.base, x1, H) for x0, x1 in fins)))


def t_bottom(x, a: float) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return ((x - 2.5) ** 2 + 6.25) * a


def heatsink_segments(spec: HeatsinkSpec, H: float) -> dict:
    """Boundary segments ``(p0, p1, normal)`` grouped as bottom/top/other."""
    W, b = spec.width, spec.base
    fins = spec.fins()
    other = [((0, 0), (0, b), (-1, 0)), ((W, 0), (W, b), (1, 0))]
    xs = [0.0] + [v for f in fins for v in f] + [W]
    for x0, x1 in zip(xs[::2], xs[1::2]):
        other.append(((x0, b), (x1, b), (0, 1)))
    for x0, x1 in fins:
        other.append(((x0, b), (x0, H), (-1, 0)))
        other.append(((x1, b), (x1, H), (1, 0)))
    return {
        "bottom": [((0, 0), (W, 0), (0, -1))],
        "top": [((x0, H), (x1, H), (0, 1)) for x0, x1 in fins],
        "other": other,
    }


def _sample_segments(segs, n: int, rng: np.random.Generator):
    p0 = np.array([s[0] for s in segs], dtype=np.float64)
    p1 = np.array([s[1] for s in segs], dtype=np.float64)
    nrm = np.array([s[2] for s in segs], dtype=np.float64)
    length = np.linalg.norm(p1 - p0, axis=1)
    which = rng.choice(len(segs), size=n, p=length / length.sum())
    t = rng.uniform(size=(n, 1))
    return p0[which] + t * (p1[which] - p0[which]), nrm[which]


def lattice_nodes(domain: RectUnion, step: float) -> np.ndarray:
    """Lattice points ``(i step, j step)`` inside the closed domain."""
    bb = domain.bbox
    ii = np.arange(round(bb[0, 0] / step), round(bb[1, 0] / step) + 1)
    jj = np.arange(round(bb[0, 1] / step), round(bb[1, 1] / step) + 1)
    gi, gj = np.meshgrid(ii, jj)
    pts = np.column_stack([gi.ravel(), gj.ravel()]) * step
    return pts[domain.contains(pts, tol=1e-9)]


def _check_aligned(spec: HeatsinkSpec, H: float, step: float) -> None:
    vals = [spec.width, spec.base, H, *(v for f in spec.fins() for v in f)]
    if any(abs(v / step - round(v / step)) > 1e-9 for v in vals):
        raise DomainError(f"geometry is not aligned with the grid step {step}")


def heatsink_mesh(spec: HeatsinkSpec, H: float, a: float, top: str = "dirichlet", step: float | None = None) -> Mesh:
    """Lattice nodes tagged with bottom Dirichlet, top Dirichlet (``T_top``) or
    zero-flux Neumann, and zero-flux Neumann on every other boundary node."""
    step = step or spec.mesh_step
    domain = spec.domain(H)
    nodes = lattice_nodes(domain, step)
    if abs(H / step - round(H / step)) > 1e-9:
        # fin tops off the lattice get their own row
        tops = [np.column_stack([np.arange(x0, x1 + step / 2, step), np.full(len(np.arange(x0, x1 + step / 2, step)), H)]) for x0, x1 in spec.fins()]
        nodes = np.concatenate([nodes, *tops])
    cond = NodeConditions(HEAT_SCHEMA, len(nodes))
    x, y = nodes[:, 0], nodes[:, 1]
    tol = 1e-9
    bottom = np.flatnonzero(y < tol)
    is_top = np.abs(y - H) < tol
    on_boundary = _on_boundary(domain, nodes, step)
    other = np.flatnonzero(on_boundary & ~is_top & (y >= tol))
    cond.set("neumann", other, [0.0, 0.0])
    cond.set("dirichlet", bottom, t_bottom(x[bottom], a).reshape(-1, 1))
    top_idx = np.flatnonzero(is_top)
    if top == "dirichlet":
        cond.set("dirichlet", top_idx, spec.t_top)
    elif top == "neumann":
        cond.set("neumann", top_idx, [0.0, 0.0])
    else:
        raise ValueError(f"top boundary must be 'dirichlet' or 'neumann', got {top!r}")
    bbox = domain.bbox
    return Mesh(nodes, cond, bbox, {"benchmark": "heatsink2d", "H": H, "a": a, "top": top})


def _on_boundary(domain: RectUnion, pts, step: float) -> np.ndarray:
    d = step / 2
    inside = np.ones(len(pts), dtype=bool)
    for off in ((d, 0), (-d, 0), (0, d), (0, -d)):
        inside &= domain.contains(pts + np.array(off), tol=0.0)
    return ~inside


def _interior_samples(domain: RectUnion, n: int, margin: float, rng) -> np.ndarray:
    out, have = [], 0
    offs = [np.array(o) for o in ((margin, 0), (-margin, 0), (0, margin), (0, -margin))]
    while have < n:
        p = domain.sample(2 * (n - have) + 8, rng)
        ok = np.ones(len(p), dtype=bool)
        for o in offs:
            ok &= domain.contains(p + o, tol=0.0)
        p = p[ok][: n - have]
        out.append(p)
        have += len(p)
    return np.concatenate(out)


def heatsink_instance(
    H: float,
    a: float,
    spec: HeatsinkSpec = HeatsinkSpec(),
    rng: np.random.Generator | None = None,
    n_collocation: int = 512,
    n_boundary: int = 128,
    h: float | None = None,
) -> PDEInstance:
    """Unlabelled instance for physics-only training.

    ``h`` is the residual stencil step the samples must accommodate (defaults
    to 1e-3 of the bbox extent).
    """
    rng = rng or np.random.default_rng(0)
    domain = spec.domain(H)
    mesh = heatsink_mesh(spec, H, a)
    h = h or 1e-3 * float(np.max(domain.bbox[1] - domain.bbox[0]))
    segs = heatsink_segments(spec, H)
    bottom, _ = _sample_segments(segs["bottom"], n_boundary, rng)
    top, _ = _sample_segments(segs["top"], n_boundary, rng)
    other, normals = _sample_segments(segs["other"], n_boundary, rng)
    extra = {
        "collocation": _interior_samples(domain, n_collocation, 1.5 * h, rng),
        "bottom": bottom,
        "bottom_values": t_bottom(bottom[:, 0], a),
        "top": top,
        "top_values": np.full(len(top), spec.t_top),
        "other": other,
        "other_normals": normals,
        "other_flux": np.zeros(len(other)),
    }
    return PDEInstance(mesh, mesh.nodes.copy(), None, ("T",), domain, {"H": H, "a": a}, extra)


def heatsink_sampler(spec: HeatsinkSpec, seed: int):
    """Endless reproducible stream of random ``(H, a)`` pairs."""
    rng = np.random.default_rng(seed)
    while True:
        yield float(rng.uniform(*spec.h_range)), float(rng.uniform(*spec.a_range))


def solve_heat_fd(spec: HeatsinkSpec, H: float, a: float, top: str = "dirichlet", step: float | None = None):
    """Five-point finite-difference solution of ``laplace T = 0``.

    Zero-flux boundaries use mirror ghost nodes. Returns ``(nodes, T)`` with
    nodes in :func:`lattice_nodes` order.
    """
    step = step or spec.mesh_step
    _check_aligned(spec, H, step)
    domain = spec.domain(H)
    nodes = lattice_nodes(domain, step)
    ij = np.rint(nodes / step).astype(np.int64)
    lookup = {(int(i), int(j)): k for k, (i, j) in enumerate(ij)}
    n = len(nodes)
    tol = 1e-9
    bottom = nodes[:, 1] < tol
    is_top = np.abs(nodes[:, 1] - H) < tol
    fixed = bottom | (is_top if top == "dirichlet" else np.zeros(n, dtype=bool))
    values = np.zeros(n)
    values[bottom] = t_bottom(nodes[bottom, 0], a)
    if top == "dirichlet":
        values[is_top] = spec.t_top
    elif top != "neumann":
        raise ValueError(f"top boundary must be 'dirichlet' or 'neumann', got {top!r}")
    rows, cols, data = [], [], []
    rhs = np.zeros(n)
    for k in range(n):
        if fixed[k]:
            rows.append(k), cols.append(k), data.append(1.0)
            rhs[k] = values[k]
            continue
        i, j = ij[k]
        rows.append(k), cols.append(k), data.append(-4.0)
        for di, dj in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            nb = lookup.get((i + di, j + dj))
            if nb is None:
                nb = lookup.get((i - di, j - dj))
                if nb is None:
                    raise DomainError(f"node {nodes[k]} has no neighbour on either side")
            rows.append(k), cols.append(nb), data.append(1.0)
    A = sp.csr_matrix((data, (rows, cols)), shape=(n, n))
    return nodes, spla.spsolve(A, rhs)


def rect_heat_series(x, y, width: float, height: float, a: float, top: str = "dirichlet", n_terms: int = 200):
    """Cosine-series solution on a fin-less plate with insulated sides.

    Bottom ``T = ((x - 2.5)^2 + 6.25) a`` (the series assumes ``width = 5``),
    top ``T = 0`` or zero flux.
    """
    x, y = _xy(x, y)
    c0 = a * (width**2 / 12 + 6.25)
    out = c0 * ((height - y) / height if top == "dirichlet" else np.ones_like(y))
    for m in range(2, n_terms + 1, 2):  # odd cosine coefficients vanish
        k = m * np.pi / width
        c = 4 * a / k**2
        if top == "dirichlet":
            prof = np.exp(-k * y) * (1 - np.exp(-2 * k * (height - y))) / (1 - np.exp(-2 * k * height))
        else:
            prof = np.exp(-k * y) * (1 + np.exp(-2 * k * (height - y))) / (1 + np.exp(-2 * k * height))
        out = out + c * np.cos(k * x) * prof
    return out


# -- ambiguity set ----------------------------------------------------------

def ambiguity_dataset(seed: int = 0, n_pairs: int = 5, spec: HeatsinkSpec = HeatsinkSpec()) -> list[PDEInstance]:
    """``n_pairs`` instances with a ``T = 0`` Dirichlet top followed by the same
    ``(H, a)`` with a zero-flux Neumann top. Labels are finite-difference
    solutions at the mesh nodes."""
    rng = np.random.default_rng(seed)
    lo, hi = (round(v / spec.mesh_step) for v in spec.h_range)
    params = [(float(rng.integers(lo, hi + 1)) * spec.mesh_step, float(rng.uniform(*spec.a_range))) for _ in range(n_pairs)]
    out = []
    for top in ("dirichlet", "neumann"):
        for H, a in params:
            mesh = heatsink_mesh(spec, H, a, top)
            nodes, T = solve_heat_fd(spec, H, a, top)
            out.append(
                PDEInstance(mesh, nodes, T.reshape(-1, 1), ("T",), spec.domain(H), {"H": H, "a": a, "top": top})
            )
    return out


def top_nodes(instance: PDEInstance) -> np.ndarray:
    H = instance.params["H"]
    return np.flatnonzero(np.abs(instance.mesh.nodes[:, 1] - H) < 1e-9)


# -- serialization ----------------------------------------------------------

DATASET_FORMAT = "mmet-dataset"
DATASET_VERSION = 1


def write_labels_csv(path, instances, fields) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["instance", "point", "x", "y", *fields])
        for i, inst in enumerate(instances):
            labels = inst.labels if inst.labels is not None else np.zeros((len(inst.queries), 0))
            for p, (xy, lab) in enumerate(zip(inst.queries, labels.reshape(len(inst.queries), -1))):
                w.writerow([i, p, repr(float(xy[0])), repr(float(xy[1])), *(repr(float(v)) for v in lab)])


def read_labels_csv(path) -> tuple[tuple, dict]:
    """``(fields, {instance: (points, labels)})``."""
    with Path(path).open(newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        if header[:4] != ["instance", "point", "x", "y"]:
            raise ValueError(f"{path}: unexpected labels header {header[:4]}")
        rows: dict = {}
        for row in r:
            rows.setdefault(int(row[0]), []).append([float(v) for v in row[2:]])
    out = {}
    for i, vals in rows.items():
        arr = np.asarray(vals)
        out[i] = (arr[:, :2], arr[:, 2:])
    return tuple(header[4:]), out


def generate(benchmark: str, seed: int, out_dir, **options) -> dict:
    """Write a dataset directory: ``manifest.json``, a reference mesh and one
    labels CSV per split. Returns the manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {"format": DATASET_FORMAT, "version": DATASET_VERSION, "benchmark": benchmark, "seed": seed, "options": options, "splits": {}}
    if benchmark == "poisson":
        train_grid, test_grid = poisson_grids(options.get("n_train", 50), options.get("n_test", 100))
        splits = {"train": [poisson_instance(train_grid)], "test": [poisson_instance(test_grid)]}
        manifest["splits"] = {k: [{}] for k in splits}
        mesh = splits["train"][0].mesh
        fields = ("u",)
    elif benchmark == "beam2d":
        kw = {k: options[k] for k in ("n_train", "n_train_points", "n_test", "n_test_points") if k in options}
        if "m_range" in options:
            kw["m_range"] = tuple(options["m_range"])
        train, test = beam_dataset(seed, **kw)
        splits = {"train": train, "test": test}
        manifest["splits"] = {k: [{"M": float(m)} for m in d.moments] for k, d in splits.items()}
        mesh = beam_mesh(train.spec(0))
        fields = BEAM_FIELDS
    elif benchmark == "ambiguity":
        insts = ambiguity_dataset(seed, options.get("n_pairs", 5))
        splits = {"train": insts}
        manifest["splits"] = {"train": [dict(i.params) for i in insts]}
        mesh = insts[0].mesh
        fields = ("T",)
    elif benchmark == "heatsink2d":
        spec = HeatsinkSpec()
        stream = heatsink_sampler(spec, seed)
        n = options.get("n_instances", 10)
        pairs = [next(stream) for _ in range(n)]
        splits = {"train": [heatsink_instance(H, a, spec, np.random.default_rng([seed, i])) for i, (H, a) in enumerate(pairs)]}
        manifest["splits"] = {"train": [{"H": H, "a": a} for H, a in pairs]}
        mesh = splits["train"][0].mesh
        fields = ()
    else:
        raise ValueError(f"unknown benchmark {benchmark!r}; expected one of {BENCHMARKS}")
    manifest["fields"] = list(fields)
    (out / "mesh.json").write_text(json.dumps(mesh_to_json(mesh)))
    for name, insts in splits.items():
        write_labels_csv(out / f"labels_{name}.csv", insts, fields)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


def load_dataset(path) -> dict:
    """Rebuild the instances of a generated dataset, split by name.

    Meshes are rebuilt from the per-instance parameters; points and labels
    come from the CSV files, so externally produced references (e.g. FEM
    fields) in the same layout load the same way.
    """
    root = Path(path)
    manifest = json.loads((root / "manifest.json").read_text())
    if manifest.get("format") != DATASET_FORMAT or manifest.get("version") != DATASET_VERSION:
        raise ValueError(f"{root}: not a version-{DATASET_VERSION} dataset")
    bench = manifest["benchmark"]
    out = {}
    for split, params in manifest["splits"].items():
        fields, table = read_labels_csv(root / f"labels_{split}.csv")
        insts = []
        for i, p in enumerate(params):
            pts, labels = table.get(i, (np.zeros((0, 2)), np.zeros((0, len(fields)))))
            labels = labels if labels.shape[1] else None
            insts.append(_rebuild(bench, p, pts, labels, fields))
        out[split] = insts
    return out


def _rebuild(bench: str, params: dict, pts, labels, fields) -> PDEInstance:
    if bench == "poisson":
        inst = poisson_instance(pts)
    elif bench == "beam2d":
        inst = beam_instance(BeamSpec(M=params["M"]), pts)
    elif bench == "ambiguity":
        spec = HeatsinkSpec()
        mesh = heatsink_mesh(spec, params["H"], params["a"], params["top"])
        inst = PDEInstance(mesh, pts, None, fields, spec.domain(params["H"]), dict(params))
    elif bench == "heatsink2d":
        spec = HeatsinkSpec()
        inst = heatsink_instance(params["H"], params["a"], spec)
        inst.queries = pts
    else:
        raise ValueError(f"unknown benchmark {bench!r}")
    inst.labels = labels
    inst.fields = tuple(fields)
    return inst
