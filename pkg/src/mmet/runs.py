"""Run configuration and the per-benchmark train / eval / ablation drivers.

The CLI is a thin layer over these functions; the acceptance tests call
them directly.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import backend as B
from . import benchmarks as bm
from . import training as T
from .geometry import Mesh, token_count
from .model import MMET, ModelConfig, load_model, preset, save_model

log = logging.getLogger(__name__)

CONFIG_VERSION = 1


class ConfigError(ValueError):
    pass


SCHEMAS = {
    "poisson": bm.POISSON_SCHEMA,
    "beam2d": bm.BEAM_SCHEMA,
    "heatsink2d": bm.HEAT_SCHEMA,
    "ambiguity": bm.HEAT_SCHEMA,
}

# Desk-scale adjustments on top of the reference rows. Poisson runs the
# reference row unchanged.
MODEL_DEFAULTS = {
    "poisson": ("poisson", {}),
    "beam2d": ("beam2d", dict(d_model=64, out_dim=5, output_scale=[0.5, 2.0, 10.0, 1.0, 1.0])),
    "heatsink2d": ("heatsink2d", dict(d_model=64, patch_size=16, output_scale=[10.0])),
    "ambiguity": ("heatsink2d", dict(d_model=64, patch_size=16, output_scale=[10.0])),
}

TRAIN_DEFAULTS = {name: T.TRAIN_PRESETS[name] for name in SCHEMAS}

OPTION_DEFAULTS = {
    "poisson": dict(n_train=50, n_test=100, stencil_fraction=1e-3),
    "beam2d": dict(n_train=64, n_train_points=1000, n_test=8, n_test_points=5000, m_range=[0.5, 1.5]),
    "heatsink2d": dict(n_val=2, n_collocation=256, n_boundary=64),
    "ambiguity": dict(n_pairs=5, seeds=[0]),
}


@dataclass
class RunConfig:
    benchmark: str = "poisson"
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    options: dict = field(default_factory=dict)
    paths: dict = field(default_factory=dict)
    seed: int = 0
    precision: int = 64
    schema_version: int = CONFIG_VERSION

    def __post_init__(self):
        if self.benchmark not in SCHEMAS:
            raise ConfigError(f"unknown benchmark {self.benchmark!r}; expected one of {sorted(SCHEMAS)}")
        if self.precision not in (32, 64):
            raise ConfigError("precision must be 32 or 64")
        if self.schema_version != CONFIG_VERSION:
            raise ConfigError(f"config schema_version {self.schema_version} unsupported (want {CONFIG_VERSION})")
        unknown = set(self.options) - set(OPTION_DEFAULTS[self.benchmark]) - {"patch_sizes", "patch_epochs", "max_train_tokens"}
        if unknown:
            raise ConfigError(f"unknown options for {self.benchmark}: {sorted(unknown)}")
        try:
            self.model_config()
            self.train_config()
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    def model_config(self) -> ModelConfig:
        name, desk = MODEL_DEFAULTS[self.benchmark]
        known = {f.name for f in fields(ModelConfig)}
        unknown = set(self.model) - known
        if unknown:
            raise ConfigError(f"unknown model keys: {sorted(unknown)}")
        return preset(name, **{**desk, **self.model})

    def train_config(self) -> T.TrainConfig:
        return T.TrainConfig.from_dict({**TRAIN_DEFAULTS[self.benchmark], "seed": self.seed, **self.train})

    def opt(self, key):
        return self.options.get(key, OPTION_DEFAULTS[self.benchmark].get(key))

    def to_dict(self) -> dict:
        return asdict(self)

    def resolved(self) -> dict:
        """Everything a run used, defaults filled in."""
        return {
            **self.to_dict(),
            "model": self.model_config().to_dict(),
            "train": self.train_config().to_dict(),
            "options": {**OPTION_DEFAULTS[self.benchmark], **self.options},
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**doc)

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        return cls.from_dict(doc)

    def dump(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


def build_model(cfg: RunConfig, **model_overrides) -> MMET:
    mc = cfg.model_config()
    if model_overrides:
        mc = ModelConfig.from_dict({**mc.to_dict(), **model_overrides})
    return MMET(mc, SCHEMAS[cfg.benchmark], seed=cfg.seed)


# -- per-benchmark training -------------------------------------------------

@dataclass
class Task:
    loss_fn: object
    batches: object
    evaluate: object


def poisson_task(cfg: RunConfig) -> Task:
    tc = cfg.train_config()
    train_grid, test_grid = bm.poisson_grids(cfg.opt("n_train"), cfg.opt("n_test"))
    train_inst = bm.poisson_instance(train_grid, mesh_n=cfg.opt("n_train"))
    test_inst = bm.poisson_instance(test_grid, mesh_n=cfg.opt("n_train"))
    interior = np.flatnonzero(train_inst.extra["interior"])
    boundary = np.flatnonzero(~train_inst.extra["interior"])
    n = tc.points_per_step or len(interior)
    h = T.stencil_step(train_inst.mesh.bbox, cfg.opt("stencil_fraction"))

    def loss_fn(model, inst, rng):
        idx_pde = rng.choice(interior, min(n, len(interior)), replace=False)
        # boundary values pin the harmonic part, so every step sees all of them
        idx_data = np.concatenate([boundary, rng.choice(interior, min(n, len(interior)), replace=False)])
        return T.poisson_loss(model, inst, idx_pde, idx_data, h=h, weights=tc.loss_weights)

    def batches(epoch, rng):
        for _ in range(tc.steps_per_epoch or 1):
            yield [train_inst] * tc.batch_size

    def evaluate(model):
        return T.relative_l2(model.predict(test_inst.mesh, test_inst.queries, 2500).ravel(), test_inst.labels.ravel())

    return Task(loss_fn, batches, evaluate)


def beam_field_errors(pred: np.ndarray, truth: np.ndarray) -> dict:
    """Relative L2 of u, v and the von Mises stress (from predicted components)."""
    sv_p = bm.von_mises(pred[:, 2], pred[:, 3], pred[:, 4])
    sv_t = bm.von_mises(truth[:, 2], truth[:, 3], truth[:, 4])
    return {
        "u": T.relative_l2(pred[:, 0], truth[:, 0]),
        "v": T.relative_l2(pred[:, 1], truth[:, 1]),
        "sigma_v": T.relative_l2(sv_p, sv_t),
    }


def beam_data(cfg: RunConfig):
    return bm.beam_dataset(
        cfg.seed,
        n_train=cfg.opt("n_train"),
        n_train_points=cfg.opt("n_train_points"),
        n_test=cfg.opt("n_test"),
        n_test_points=cfg.opt("n_test_points"),
        m_range=tuple(cfg.opt("m_range")),
    )


def beam_task(cfg: RunConfig, data=None) -> Task:
    tc = cfg.train_config()
    train_set, test_set = data or beam_data(cfg)
    meshes = {}

    def mesh(ds, i):
        key = (id(ds), i)
        if key not in meshes:
            meshes[key] = ds.instance(i)
        return meshes[key]

    def loss_fn(model, item, rng):
        inst = mesh(train_set, item)
        k = tc.points_per_step or len(inst.queries)
        idx = rng.choice(len(inst.queries), min(k, len(inst.queries)), replace=False)
        return T.supervised_loss(model, inst, idx, tc.loss_weights)

    def batches(epoch, rng):
        order = rng.permutation(len(train_set))
        steps = tc.steps_per_epoch or math.ceil(len(order) / tc.batch_size)
        for s in range(steps):
            start = (s * tc.batch_size) % len(order)
            yield [int(order[(start + j) % len(order)]) for j in range(tc.batch_size)]

    def evaluate(model):
        errs = [beam_field_errors(model.predict(*_mq(mesh(test_set, i)), 2500), mesh(test_set, i).labels) for i in range(len(test_set))]
        return float(np.mean([e["u"] for e in errs]))

    return Task(loss_fn, batches, evaluate)


def _mq(inst):
    return inst.mesh, inst.queries


def heatsink_task(cfg: RunConfig) -> Task:
    tc = cfg.train_config()
    spec = bm.HeatsinkSpec()
    stream = bm.heatsink_sampler(spec, cfg.seed)
    val = bm.ambiguity_dataset(cfg.seed + 1, cfg.opt("n_val"), spec)[: cfg.opt("n_val")]

    def loss_fn(model, item, rng):
        H, a = item
        inst = bm.heatsink_instance(H, a, spec, rng, cfg.opt("n_collocation"), cfg.opt("n_boundary"))
        return T.heatsink_loss(model, inst, weights=tc.loss_weights)

    def batches(epoch, rng):
        for _ in range(tc.steps_per_epoch or 1):
            yield [next(stream) for _ in range(tc.batch_size)]

    def evaluate(model):
        return T.relative_l2(
            [model.predict(v.mesh, v.queries).ravel() for v in val], [v.labels.ravel() for v in val]
        )

    return Task(loss_fn, batches, evaluate)


def ambiguity_task(cfg: RunConfig, data=None) -> Task:
    tc = cfg.train_config()
    insts = data or bm.ambiguity_dataset(cfg.seed, cfg.opt("n_pairs"))

    def loss_fn(model, inst, rng):
        idx = None
        if tc.points_per_step:
            idx = rng.choice(len(inst.queries), min(tc.points_per_step, len(inst.queries)), replace=False)
        return T.supervised_loss(model, inst, idx, tc.loss_weights)

    def batches(epoch, rng):
        for _ in range(tc.steps_per_epoch or 1):
            order = rng.permutation(len(insts))
            yield [insts[i] for i in order[: tc.batch_size]]

    def evaluate(model):
        return float(np.mean(list(ambiguity_errors(model, insts).values())))

    return Task(loss_fn, batches, evaluate)


def ambiguity_errors(model, insts) -> dict:
    """Mean relative L2 per half (``D`` Dirichlet top, ``N`` Neumann top)."""
    out = {}
    for half, top in (("D", "dirichlet"), ("N", "neumann")):
        sel = [i for i in insts if i.params["top"] == top]
        out[half] = T.relative_l2([model.predict(i.mesh, i.queries).ravel() for i in sel], [i.labels.ravel() for i in sel])
    return out


TASKS = {"poisson": poisson_task, "beam2d": beam_task, "heatsink2d": heatsink_task, "ambiguity": ambiguity_task}


def run_training(cfg: RunConfig, out_dir=None, model: MMET | None = None, task: Task | None = None):
    """Train per ``cfg``; returns ``(model with best params, TrainResult)``.

    With ``out_dir`` writes ``config.json``, ``log.csv``, ``timing.csv`` and
    ``checkpoint.json`` (best parameters). On divergence the last good
    parameters go to ``checkpoint.json`` before the error propagates.
    """
    B.set_precision(cfg.precision)
    model = model or build_model(cfg)
    task = task or TASKS[cfg.benchmark](cfg)
    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(json.dumps(cfg.resolved(), indent=2, sort_keys=True) + "\n")
    try:
        result = T.train(
            model, task.loss_fn, task.batches, cfg.train_config(), task.evaluate,
            out / "log.csv" if out else None, out / "timing.csv" if out else None,
        )
    except T.TrainingDiverged as exc:
        if out:
            save_model(model, out / "checkpoint.json", benchmark=cfg.benchmark, diverged_epoch=exc.epoch)
        raise
    model.load_state_dict(result.best_state)
    if out:
        save_model(model, out / "checkpoint.json", benchmark=cfg.benchmark, best_epoch=result.best_epoch, best_val=result.best_val)
    return model, result


# -- evaluation -------------------------------------------------------------

def evaluate_instances(model: MMET, insts, benchmark: str, dump=None) -> dict:
    """Per-field relative L2 over labelled instances; optional CSV dump of
    ``x, y`` and per-field prediction, truth and absolute error."""
    preds = [model.predict(i.mesh, i.queries, 2500) for i in insts]
    if any(i.labels is None for i in insts):
        raise ValueError("dataset has no labels to evaluate against")
    if benchmark == "beam2d":
        per = [beam_field_errors(p, i.labels) for p, i in zip(preds, insts)]
        metrics = {k: float(np.mean([e[k] for e in per])) for k in per[0]}
        names = list(bm.BEAM_FIELDS)
    else:
        names = list(insts[0].fields) or [f"f{k}" for k in range(preds[0].shape[1])]
        metrics = {
            n: T.relative_l2([p[:, k] for p in preds], [i.labels.reshape(len(i.queries), -1)[:, k] for i in insts])
            for k, n in enumerate(names)
        }
        if benchmark == "ambiguity":
            metrics.update({f"T-{h}": v for h, v in ambiguity_errors(model, insts).items()})
    if dump:
        with Path(dump).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["instance", "x", "y", *(f"{n}_{s}" for n in names for s in ("pred", "truth", "abs_err"))])
            for j, (p, inst) in enumerate(zip(preds, insts)):
                lab = inst.labels.reshape(len(inst.queries), -1)
                for r in range(len(inst.queries)):
                    vals = []
                    for k in range(len(names)):
                        vals += [repr(float(p[r, k])), repr(float(lab[r, k])), repr(float(abs(p[r, k] - lab[r, k])))]
                    w.writerow([j, repr(float(inst.queries[r, 0])), repr(float(inst.queries[r, 1])), *vals])
    return metrics


def default_eval_instances(cfg: RunConfig) -> list:
    if cfg.benchmark == "poisson":
        return [bm.poisson_instance(bm.poisson_grids(cfg.opt("n_train"), cfg.opt("n_test"))[1], mesh_n=cfg.opt("n_train"))]
    if cfg.benchmark == "beam2d":
        return list(beam_data(cfg)[1])
    if cfg.benchmark == "ambiguity":
        return bm.ambiguity_dataset(cfg.seed, cfg.opt("n_pairs"))
    return bm.ambiguity_dataset(cfg.seed + 1, cfg.opt("n_val"))[: cfg.opt("n_val")]


def default_mesh(benchmark: str, seed: int = 0) -> Mesh:
    if benchmark == "poisson":
        return bm.poisson_mesh()
    if benchmark == "beam2d":
        return bm.beam_mesh(bm.BeamSpec())
    return bm.heatsink_mesh(bm.HeatsinkSpec(), 2.0, 1.0)


# -- queries and attention export ------------------------------------------

def resolution_grid(bbox, nx: int, ny: int) -> np.ndarray:
    """Inclusive ``nx x ny`` grid over the bbox, x fastest."""
    bbox = np.asarray(bbox, dtype=np.float64)
    gx, gy = np.meshgrid(np.linspace(bbox[0, 0], bbox[1, 0], nx), np.linspace(bbox[0, 1], bbox[1, 1], ny))
    return np.column_stack([gx.ravel(), gy.ravel()])


def write_field_csv(path, points, values, names) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y", *names])
        for p, v in zip(points, values):
            w.writerow([repr(float(p[0])), repr(float(p[1])), *(repr(float(x)) for x in v)])


def read_points(path) -> np.ndarray:
    """Points from a CSV with ``x, y`` columns (header optional)."""
    rows = []
    with Path(path).open(newline="") as fh:
        for row in csv.reader(fh):
            if not row:
                continue
            try:
                rows.append([float(row[0]), float(row[1])])
            except ValueError:
                if rows:
                    raise
    return np.asarray(rows, dtype=np.float64).reshape(-1, 2)


def export_attention(model: MMET, mesh: Mesh, queries, path) -> np.ndarray:
    """Decoder attention as rows ``layer, head, query, token, weight``."""
    if model.cfg.attention != "dot":
        raise ValueError("attention export needs dot-product attention")
    with B.no_grad():
        memory = model.encode(mesh)
        _, weights = model.decode(queries, memory, mesh.bbox, return_attention=True)
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["layer", "head", "query", "token", "weight"])
        for layer, wl in enumerate(weights):
            for head in range(wl.shape[0]):
                for q in range(wl.shape[1]):
                    for t in range(wl.shape[2]):
                        w.writerow([layer, head, q, t, repr(float(wl[head, q, t]))])
    return np.stack(weights)


# -- ablations --------------------------------------------------------------

EMBEDDING_LABELS = {"mlp": "MLP", "mlp_type": "MLP+type", "gce": "GCE"}


def gce_ablation(cfg: RunConfig, out_csv=None) -> list[dict]:
    """Train each embedding on the ambiguity set; rows per half and embedding.

    Errors are averaged over ``options.seeds`` (model init and data order).
    """
    if cfg.benchmark != "ambiguity":
        cfg = RunConfig(benchmark="ambiguity", seed=cfg.seed, precision=cfg.precision)
    insts = bm.ambiguity_dataset(cfg.seed, cfg.opt("n_pairs"))
    rows = []
    for kind in ("mlp", "mlp_type", "gce"):
        errs = {"D": [], "N": []}
        for s in cfg.opt("seeds"):
            run = RunConfig(**{**cfg.to_dict(), "seed": int(s), "model": {**cfg.model, "embedding": kind}})
            model, _ = run_training(run, task=ambiguity_task(run, insts))
            for half, e in ambiguity_errors(model, insts).items():
                errs[half].append(e)
        for half in ("D", "N"):
            rows.append({"embedding": EMBEDDING_LABELS[kind], "half": half, "rel_l2": float(np.mean(errs[half])), "n_seeds": len(errs[half])})
    if out_csv:
        _write_rows(out_csv, rows)
    return rows


def attention_buffer_bytes(n_tokens: int, n_head: int, n_layers: int, itemsize: int = 8) -> int:
    """Score buffers of the encoder self-attention: tokens^2 x heads x layers."""
    return n_tokens * n_tokens * n_head * n_layers * itemsize


def encoder_time(model: MMET, mesh: Mesh, repeats: int = 3) -> float:
    times = []
    with B.no_grad():
        plan = model.plan(mesh)
        for _ in range(repeats):
            t0 = time.perf_counter()
            model.encode(mesh, plan)
            times.append(time.perf_counter() - t0)
    return float(np.median(times))


def patch_ablation(cfg: RunConfig, out_csv=None, sizes=None, mesh: Mesh | None = None) -> list[dict]:
    """Patch-size sweep on the Beam2d mesh: tokens, buffer estimate, encoder
    wall time and (when the token count allows training) the u error."""
    if cfg.benchmark != "beam2d":
        cfg = RunConfig(benchmark="beam2d", seed=cfg.seed, precision=cfg.precision)
    B.set_precision(cfg.precision)
    sizes = sizes or cfg.opt("patch_sizes") or [1, 2, 4, 8, 128]
    mesh = mesh or default_mesh("beam2d")
    epochs = cfg.opt("patch_epochs") or 0
    max_tokens = cfg.opt("max_train_tokens") or 1400
    itemsize = 8 if cfg.precision == 64 else 4
    data = beam_data(cfg) if epochs else None
    rows = []
    for p in sizes:
        model = build_model(cfg, patch_size=int(p))
        mc = model.cfg
        n_tok = token_count(len(mesh), int(p))
        row = {
            "patch_size": int(p),
            "tokens": n_tok,
            "attn_buffer_bytes": attention_buffer_bytes(n_tok, mc.n_head, mc.n_encoder, itemsize),
            "encoder_seconds": encoder_time(model, mesh),
            "rel_l2_u": "",
        }
        if epochs and n_tok <= max_tokens:
            run = RunConfig(**{**cfg.to_dict(), "model": {**cfg.model, "patch_size": int(p)}, "train": {**cfg.train, "epochs": epochs}})
            _, res = run_training(run, model=model, task=beam_task(run, data))
            row["rel_l2_u"] = res.best_val
        rows.append(row)
    if out_csv:
        _write_rows(out_csv, rows)
    return rows


def _write_rows(path, rows) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def load_checkpoint_model(path) -> tuple[MMET, dict]:
    return load_model(path)
