"""``mmet`` command line: gen, train, eval, query, ablate, export-attn.

Exit codes: 0 success, 2 configuration error, 3 numeric divergence, 4 I/O.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import warnings
from pathlib import Path

from . import backend as B
from . import benchmarks as bm
from .geometry import MeshError, load_mesh
from .model import load_model
from .runs import (
    ConfigError,
    RunConfig,
    default_eval_instances,
    default_mesh,
    evaluate_instances,
    export_attention,
    gce_ablation,
    patch_ablation,
    read_points,
    resolution_grid,
    run_training,
    write_field_csv,
)
from .training import TrainingDiverged

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_IO = 0, 2, 3, 4

log = logging.getLogger("mmet")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="run config JSON")
    p.add_argument("--seed", type=int, help="overrides the config seed")
    p.add_argument("--out", type=Path, default=Path("runs/out"), help="output directory")
    p.add_argument("--precision", type=int, choices=(32, 64), help="float width")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mmet", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("gen", help="write a benchmark dataset")
    p.add_argument("benchmark", nargs="?", choices=bm.BENCHMARKS)
    _common(p)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--benchmark", choices=bm.BENCHMARKS)
    p.add_argument("--epochs", type=int)
    _common(p)

    p = sub.add_parser("eval", help="relative L2 per field")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--dataset", type=Path, help="generated dataset directory (default: regenerate)")
    p.add_argument("--split", default="test")
    _common(p)

    p = sub.add_parser("query", help="predict at a grid or listed points")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--mesh", type=Path, help="mesh JSON/CSV (default: the benchmark mesh)")
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--resolution", help="NXxNY inclusive grid over the mesh bbox")
    g.add_argument("--points", type=Path, help="CSV of x,y points")
    p.add_argument("--batch-size", type=int, default=None)
    _common(p)

    p = sub.add_parser("ablate", help="embedding or patch-size ablation")
    p.add_argument("kind", choices=("gce", "patch"))
    _common(p)

    p = sub.add_parser("export-attn", help="decoder attention weights as CSV")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--mesh", type=Path)
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--resolution")
    g.add_argument("--points", type=Path)
    _common(p)
    return ap


def _config(args, benchmark: str | None = None) -> RunConfig:
    doc = {}
    if args.config:
        doc = RunConfig.load(args.config).to_dict()
    if benchmark:
        doc["benchmark"] = benchmark
    if args.seed is not None:
        doc["seed"] = args.seed
    if args.precision is not None:
        doc["precision"] = args.precision
    if getattr(args, "epochs", None) is not None:
        doc["train"] = {**doc.get("train", {}), "epochs": args.epochs}
    cfg = RunConfig.from_dict(doc)
    B.set_precision(cfg.precision)
    return cfg


def _parse_resolution(text: str) -> tuple[int, int]:
    try:
        nx, ny = (int(v) for v in text.lower().split("x"))
    except ValueError as exc:
        raise ConfigError(f"resolution must look like 40x16, got {text!r}") from exc
    if nx < 1 or ny < 1:
        raise ConfigError("resolution must be positive")
    return nx, ny


def _load_ckpt(args):
    try:
        return load_model(args.checkpoint)
    except (ValueError, KeyError, TypeError) as exc:
        raise OSError(f"{args.checkpoint}: unreadable checkpoint ({exc})") from exc


def _mesh_and_points(args, model, benchmark):
    mesh = load_mesh(args.mesh, model.schema) if args.mesh else default_mesh(benchmark)
    if args.resolution:
        pts = resolution_grid(mesh.bbox, *_parse_resolution(args.resolution))
    else:
        pts = read_points(args.points)
        outside = ((pts < mesh.bbox[0]) | (pts > mesh.bbox[1])).any(axis=1)
        if outside.any():
            warnings.warn(f"{int(outside.sum())} query points lie outside the mesh bbox")
    return mesh, pts


def cmd_gen(args) -> int:
    cfg = _config(args, args.benchmark)
    manifest = bm.generate(cfg.benchmark, cfg.seed, args.out, **cfg.options)
    print(f"wrote {cfg.benchmark} dataset ({', '.join(f'{k}: {len(v)}' for k, v in manifest['splits'].items())}) to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args, args.benchmark)
    _, result = run_training(cfg, args.out)
    best = f"{result.best_val:.4e}" if result.best_val is not None else "-"
    print(f"best epoch {result.best_epoch} val relative L2 {best}; checkpoint {args.out / 'checkpoint.json'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model, meta = _load_ckpt(args)
    benchmark = meta.get("benchmark", "poisson")
    cfg = _config(args, benchmark) if args.config or args.seed is not None else RunConfig(benchmark=benchmark)
    if args.dataset:
        splits = bm.load_dataset(args.dataset)
        if args.split not in splits:
            raise ConfigError(f"dataset has no split {args.split!r} (has {sorted(splits)})")
        insts = splits[args.split]
    else:
        insts = default_eval_instances(cfg)
    args.out.mkdir(parents=True, exist_ok=True)
    metrics = evaluate_instances(model, insts, benchmark, args.out / "fields.csv")
    with (args.out / "metrics.csv").open("w") as fh:
        fh.write("field,relative_l2\n")
        for k, v in metrics.items():
            fh.write(f"{k},{v!r}\n")
    for k, v in metrics.items():
        print(f"{k}\t{v:.4e}")
    return EXIT_OK


def cmd_query(args) -> int:
    model, meta = _load_ckpt(args)
    mesh, pts = _mesh_and_points(args, model, meta.get("benchmark", "poisson"))
    pred = model.predict(mesh, pts, args.batch_size)
    names = list(bm.BEAM_FIELDS) if model.cfg.out_dim == 5 else [f"out{k}" for k in range(model.cfg.out_dim)]
    args.out.mkdir(parents=True, exist_ok=True)
    write_field_csv(args.out / "query.csv", pts, pred, names)
    print(f"{len(pts)} predictions written to {args.out / 'query.csv'}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _config(args)
    args.out.mkdir(parents=True, exist_ok=True)
    path = args.out / f"ablation_{args.kind}.csv"
    rows = gce_ablation(cfg, path) if args.kind == "gce" else patch_ablation(cfg, path)
    for r in rows:
        print("\t".join(str(v) for v in r.values()))
    return EXIT_OK


def cmd_export_attn(args) -> int:
    model, meta = _load_ckpt(args)
    if model.cfg.attention != "dot":
        raise ConfigError("export-attn supports dot-product attention only")
    mesh, pts = _mesh_and_points(args, model, meta.get("benchmark", "poisson"))
    args.out.mkdir(parents=True, exist_ok=True)
    w = export_attention(model, mesh, pts, args.out / "attention.csv")
    print(f"attention {w.shape} written to {args.out / 'attention.csv'}")
    return EXIT_OK


COMMANDS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "eval": cmd_eval,
    "query": cmd_query,
    "ablate": cmd_ablate,
    "export-attn": cmd_export_attn,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.verb](args)
    except (ConfigError, bm.DomainError, MeshError, KeyError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDiverged as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (OSError, json.JSONDecodeError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
