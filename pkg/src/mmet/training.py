"""Losses, the relative L2 metric, Adam, and the training loop.

Second derivatives for PDE residuals come from finite-difference stencils of
extra decoder queries; the decoder answers every query independently, so the
stencil is exact to O(h^2) and needs only first-order reverse mode.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from . import backend as B
from .backend import NonFiniteError, Tensor
from .geometry import RectUnion

log = logging.getLogger(__name__)

DEFAULT_STENCIL_STEP = 1e-3  # fraction of the bbox extent


class StencilError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, epoch: int, state: dict | None):
        super().__init__(message)
        self.epoch = epoch
        self.state = state


# -- metric ----------------------------------------------------------------

def _items(x) -> list[np.ndarray]:
    if isinstance(x, np.ndarray):
        return [x] if x.ndim <= 1 else list(x)
    return [np.asarray(i, dtype=np.float64) for i in x]


def relative_l2(pred, truth) -> float:
    """Mean over items of ``||pred_i - truth_i|| / ||truth_i||``.

    An ndarray of ndim <= 1 is one item; otherwise the first axis indexes
    items. Lists may hold items of different sizes.
    """
    preds, truths = _items(pred), _items(truth)
    if len(preds) != len(truths):
        raise ValueError(f"{len(preds)} predictions vs {len(truths)} references")
    errs = []
    for p, t in zip(preds, truths):
        p, t = np.asarray(p, dtype=np.float64), np.asarray(t, dtype=np.float64)
        if p.shape != t.shape:
            raise ValueError(f"shape mismatch {p.shape} vs {t.shape}")
        norm = np.linalg.norm(t)
        if norm == 0:
            raise ValueError("reference item has zero norm")
        errs.append(np.linalg.norm(p - t) / norm)
    return float(np.mean(errs))


# -- losses ----------------------------------------------------------------

def mse_data_loss(pred: Tensor, truth) -> Tensor:
    """``sum((pred - truth)^2)``."""
    truth = np.asarray(truth, dtype=pred.dtype)
    if pred.shape != truth.shape:
        raise B.ShapeError(f"prediction {pred.shape} vs truth {truth.shape}")
    r = pred - B.Tensor(truth)
    return (r * r).sum()


def _as_field_output(values):
    return values if isinstance(values, Tensor) else B.Tensor(np.asarray(values, dtype=np.float64))


def _stack_eval(fn, groups: list[np.ndarray]) -> list:
    """Evaluate ``fn`` once on all point groups and split the result."""
    pts = np.concatenate(groups, axis=0)
    out = _as_field_output(fn(pts))
    if out.ndim == 1:
        out = out.reshape(-1, 1)
    pieces, start = [], 0
    for g in groups:
        pieces.append(out[start : start + len(g)])
        start += len(g)
    return pieces


def _check_inside(points, domain):
    if domain is not None and not domain.contains(points).all():
        raise StencilError("stencil leaves the domain")


def fd_laplacian(fn: Callable, points, h: float, domain: RectUnion | None = None):
    """Five-point Laplacian of a field at ``points``.

    ``fn`` maps an ``(n, 2)`` array of coordinates to values ``(n, c)`` (a
    Tensor keeps the result differentiable). Returns ``(laplacian, center)``.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if h <= 0:
        raise ValueError("stencil step must be positive")
    ex, ey = np.array([h, 0.0]), np.array([0.0, h])
    groups = [points, points + ex, points - ex, points + ey, points - ey]
    for g in groups[1:]:
        _check_inside(g, domain)
    c, xp, xm, yp, ym = _stack_eval(fn, groups)
    lap = (xp + xm + yp + ym - c * 4.0) * (1.0 / (h * h))
    return lap, c


def fd_normal_derivative(fn: Callable, points, normals, h: float, domain: RectUnion | None = None):
    """Second-order one-sided derivative along outward ``normals``.

    Samples at ``p``, ``p - h n`` and ``p - 2h n`` (inside the domain).
    Returns ``(dT/dn, value at p)``.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    normals = np.asarray(normals, dtype=np.float64).reshape(-1, 2)
    g1, g2 = points - h * normals, points - 2 * h * normals
    _check_inside(g1, domain)
    _check_inside(g2, domain)
    c, a, b = _stack_eval(fn, [points, g1, g2])
    return (c * 3.0 - a * 4.0 + b) * (1.0 / (2 * h)), c


def model_field(model, memory: Tensor, bbox, component: int | None = None) -> Callable:
    """A decoder query function bound to a fixed encoder memory."""

    def fn(points):
        out = model.decode(points, memory, bbox)
        return out if component is None else out[:, component : component + 1]

    return fn


def stencil_step(bbox, fraction: float = DEFAULT_STENCIL_STEP) -> float:
    bbox = np.asarray(bbox, dtype=np.float64)
    return float(fraction * np.max(bbox[1] - bbox[0]))


def poisson_loss(model, instance, idx_pde=None, idx_data=None, h: float | None = None, weights=None):
    """``sum r_pde^2 + sum (u - u_true)^2`` on (subsets of) the instance points.

    ``r_pde = laplace(u) - f``, the sign under which ``u = sin(pi x) sin(pi y)``
    and ``f = -2 pi^2 sin(pi x) sin(pi y)`` form an exact pair.

    ``instance.extra`` must provide ``source`` (f at the queries) and
    ``interior`` (boolean mask of points whose stencil stays in the domain).
    """
    weights = weights or {}
    pts, labels = instance.queries, instance.labels
    f = instance.extra["source"]
    interior = np.flatnonzero(instance.extra["interior"])
    idx_pde = interior if idx_pde is None else np.asarray(idx_pde)
    idx_data = np.arange(len(pts)) if idx_data is None else np.asarray(idx_data)
    h = h or stencil_step(instance.mesh.bbox)
    memory = model.encode(instance.mesh)
    fn = model_field(model, memory, instance.mesh.bbox)
    lap, _ = fd_laplacian(fn, pts[idx_pde], h, instance.domain)
    r = lap - B.Tensor(f[idx_pde].reshape(-1, 1).astype(lap.dtype))
    l_pde = (r * r).sum()
    u = fn(pts[idx_data])
    l_data = mse_data_loss(u, labels[idx_data].reshape(-1, 1))
    terms = {"pde": l_pde, "data": l_data}
    return _combine(terms, weights)


def heatsink_loss(model, instance, h: float | None = None, weights=None, k: float = 1.0):
    """Physics-only loss: interior residual plus Dirichlet/flux boundary residuals.

    ``instance.extra`` provides ``collocation`` points, ``bottom`` points and
    ``bottom_values``, ``top`` points and ``top_values``, ``other`` points
    with outward ``other_normals`` and prescribed flux ``other_flux``.
    No internal heat source.
    """
    weights = weights or {}
    ex = instance.extra
    h = h or stencil_step(instance.mesh.bbox)
    memory = model.encode(instance.mesh)
    fn = model_field(model, memory, instance.mesh.bbox)
    lap, _ = fd_laplacian(fn, ex["collocation"], h, instance.domain)
    r_pde = -(lap * k)
    terms = {"pde": (r_pde * r_pde).sum()}
    if len(ex["bottom"]):
        r = fn(ex["bottom"]) - B.Tensor(ex["bottom_values"].reshape(-1, 1))
        terms["bottom"] = (r * r).sum()
    if len(ex["top"]):
        r = fn(ex["top"]) - B.Tensor(ex["top_values"].reshape(-1, 1))
        terms["top"] = (r * r).sum()
    if len(ex["other"]):
        dn, _ = fd_normal_derivative(fn, ex["other"], ex["other_normals"], h, instance.domain)
        r = dn - B.Tensor(ex["other_flux"].reshape(-1, 1))
        terms["other"] = (r * r).sum()
    return _combine(terms, weights)


def supervised_loss(model, instance, idx=None, weights=None):
    """Data-only loss on the instance's labelled queries (all output fields)."""
    idx = np.arange(len(instance.queries)) if idx is None else np.asarray(idx)
    scale = np.asarray(model.cfg.output_scale or np.ones(model.cfg.out_dim))
    pred = model(instance.mesh, instance.queries[idx])
    labels = instance.labels[idx].reshape(len(idx), -1)
    # residuals in units of the output scale so every field weighs alike
    r = (pred - B.Tensor(labels)) * B.Tensor(1.0 / scale)
    return _combine({"data": (r * r).sum()}, weights or {})


def _combine(terms: dict, weights: dict):
    total = None
    for name, t in terms.items():
        w = weights.get(name, 1.0)
        t = t * w if w != 1.0 else t
        total = t if total is None else total + t
    return total, {k: float(v.item()) for k, v in terms.items()}


@dataclass
class LossReport:
    total: float = 0.0
    terms: dict = field(default_factory=dict)
    history: list = field(default_factory=list)

    def record(self, epoch: int, total: float, terms: dict, val: float | None) -> None:
        self.total, self.terms = total, dict(terms)
        self.history.append({"epoch": epoch, "total": total, **terms, "val_rel_l2": val})


# -- optimizer -------------------------------------------------------------

class Adam:
    """Adam with bias correction and optional decoupled weight decay."""

    def __init__(self, params: dict, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = params
        self.lr, self.betas, self.eps, self.weight_decay = lr, betas, eps, weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, grads: dict) -> None:
        for name, g in grads.items():
            if not np.isfinite(g).all():
                raise NonFiniteError(f"non-finite gradient for {name}")
        self.t += 1
        b1, b2 = self.betas
        c1, c2 = 1 - b1**self.t, 1 - b2**self.t
        for name, p in self.params.items():
            g = grads[name]
            m = self.m[name] = b1 * self.m[name] + (1 - b1) * g
            v = self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            if self.weight_decay:
                p.data = p.data - self.lr * self.weight_decay * p.data
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_dict(self) -> dict:
        return {"t": self.t, "m": {k: v.copy() for k, v in self.m.items()}, "v": {k: v.copy() for k, v in self.v.items()}}


def adam_step(params: dict, grads: dict, state: dict | None, lr: float, **kwargs) -> dict:
    """Functional form: updates ``params`` in place and returns the new state."""
    opt = Adam(params, lr, **kwargs)
    if state:
        opt.t, opt.m, opt.v = state["t"], state["m"], state["v"]
    opt.step(grads)
    return opt.state_dict()


# -- training loop ---------------------------------------------------------

@dataclass
class TrainConfig:
    optimizer: str = "adam"
    lr: float = 1e-3
    epochs: int = 200
    batch_size: int = 2
    seed: int = 0
    loss_weights: dict = field(default_factory=dict)
    weight_decay: float = 0.0
    steps_per_epoch: int | None = None
    points_per_step: int | None = None
    schedule: str = "constant"  # or "cosine": decays to lr * LR_FLOOR by the last epoch

    def __post_init__(self):
        if self.optimizer != "adam":
            raise ValueError(f"unsupported optimizer {self.optimizer!r} (only 'adam')")
        if self.schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown lr schedule {self.schedule!r}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise KeyError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**doc)


# Desk-scale replacements for the reference schedules (L-BFGS phases become
# Adam runs sized for one CPU core).
TRAIN_PRESETS = {
    # the residual sums squared Laplacians of size ~20; boundary data is a mean
    "poisson": dict(lr=5e-3, epochs=40, batch_size=1, steps_per_epoch=25, points_per_step=256,
                    schedule="cosine", loss_weights={"data": 300.0}),
    "darcy": dict(lr=1e-3, epochs=200, batch_size=2),
    "shapenet_car": dict(lr=1e-3, epochs=200, batch_size=2),
    "heat2d": dict(lr=1e-3, epochs=100, batch_size=50),
    # M-dependence switches on after a long plateau (~60 epochs); keep lr constant
    "beam2d": dict(lr=1e-3, epochs=120, batch_size=4, steps_per_epoch=16, points_per_step=128),
    "heatsink2d": dict(lr=1e-3, epochs=20, batch_size=1, steps_per_epoch=10, points_per_step=256),
    "ambiguity": dict(lr=1e-3, epochs=200, batch_size=10, steps_per_epoch=5, points_per_step=None),
}


def train_preset(name: str, **overrides) -> TrainConfig:
    row = dict(TRAIN_PRESETS.get(name, {}))
    row.update(overrides)
    return TrainConfig(**row)


LR_FLOOR = 0.02


def epoch_lr(config: TrainConfig, epoch: int) -> float:
    if config.schedule == "constant" or config.epochs <= 1:
        return config.lr
    frac = (epoch - 1) / (config.epochs - 1)
    return config.lr * (LR_FLOOR + (1 - LR_FLOOR) * 0.5 * (1 + math.cos(math.pi * frac)))


@dataclass
class TrainResult:
    best_state: dict
    best_val: float | None
    best_epoch: int
    report: LossReport


def train(
    model,
    loss_fn: Callable,
    batches: Callable[[int, np.random.Generator], Iterable],
    config: TrainConfig,
    evaluate: Callable | None = None,
    log_path=None,
    timing_path=None,
) -> TrainResult:
    """Run ``config.epochs`` epochs of Adam.

    ``batches(epoch, rng)`` yields lists of items; ``loss_fn(model, item, rng)``
    returns ``(loss_tensor, terms)`` and the batch loss is their sum.
    ``evaluate(model)`` gives the validation relative L2 used to keep the best
    parameters. On a non-finite loss or gradient the last good parameters are
    restored and :class:`TrainingDiverged` is raised.
    """
    params = model.parameters()
    opt = Adam(params, config.lr, weight_decay=config.weight_decay)
    rng = np.random.default_rng(config.seed)
    report = LossReport()
    best_state, best_val, best_epoch = model.state_dict(), None, 0
    last_good = model.state_dict()
    writer = _LogWriter(log_path, timing_path)
    start = time.perf_counter()
    for epoch in range(1, config.epochs + 1):
        opt.lr = epoch_lr(config, epoch)
        sums: dict = {}
        total_sum, n_steps = 0.0, 0
        try:
            for batch in batches(epoch, rng):
                loss, terms = None, {}
                for item in batch:
                    l, t = loss_fn(model, item, rng)
                    loss = l if loss is None else loss + l
                    for k, v in t.items():
                        terms[k] = terms.get(k, 0.0) + v
                grads = B.grad(loss, params)
                opt.step(grads)
                last_good = model.state_dict()
                total_sum += loss.item()
                n_steps += 1
                for k, v in terms.items():
                    sums[k] = sums.get(k, 0.0) + v
        except NonFiniteError as exc:
            model.load_state_dict(last_good)
            writer.close()
            raise TrainingDiverged(f"epoch {epoch}: {exc}", epoch, last_good) from exc
        n = max(n_steps, 1)
        terms = {k: v / n for k, v in sums.items()}
        val = evaluate(model) if evaluate is not None else None
        report.record(epoch, total_sum / n, terms, val)
        if val is not None and (best_val is None or val < best_val):
            best_state, best_val, best_epoch = model.state_dict(), val, epoch
        elif evaluate is None:
            best_state, best_epoch = model.state_dict(), epoch
        writer.write(report.history[-1], time.perf_counter() - start)
        log.info("epoch %d loss %.4e val %s", epoch, total_sum / n, f"{val:.4e}" if val is not None else "-")
    writer.close()
    return TrainResult(best_state, best_val, best_epoch, report)


LOG_COLUMNS = ("epoch", "total", "val_rel_l2")


class _LogWriter:
    """Loss log (deterministic) plus a separate wall-clock file."""

    def __init__(self, log_path, timing_path):
        self.log_path = Path(log_path) if log_path else None
        self.timing_path = Path(timing_path) if timing_path else None
        self.rows: list = []
        self.times: list = []

    def write(self, row: dict, elapsed: float) -> None:
        self.rows.append(row)
        self.times.append((row["epoch"], elapsed))
        self._flush()

    def _flush(self) -> None:
        if self.log_path:
            terms = sorted({k for r in self.rows for k in r} - set(LOG_COLUMNS))
            header = ["epoch", "total", *terms, "val_rel_l2"]
            with self.log_path.open("w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(header)
                for r in self.rows:
                    w.writerow([_fmt(r.get(k)) for k in header])
        if self.timing_path:
            with self.timing_path.open("w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["epoch", "wall_clock_s"])
                for e, t in self.times:
                    w.writerow([e, f"{t:.3f}"])

    def close(self) -> None:
        pass


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)
