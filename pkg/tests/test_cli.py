import csv
import json

import numpy as np
import pytest

from mmet import backend as B
from mmet.cli import main
from mmet.runs import RunConfig


def small_config(path, benchmark="beam2d", **train):
    doc = {
        "benchmark": benchmark,
        "model": {"d_model": 16, "d_emb": 8, "patch_size": 64},
        "train": {"epochs": 1, "steps_per_epoch": 1, "batch_size": 1, "points_per_step": 16, **train},
        "options": {"n_train": 2, "n_train_points": 50, "n_test": 1, "n_test_points": 40},
    }
    path.write_text(json.dumps(doc))
    return path


def rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    cfg = small_config(d / "cfg.json")
    assert main(["train", "--config", str(cfg), "--out", str(d / "run")]) == 0
    B.set_precision(64)
    return d


def test_train_outputs(trained):
    run = trained / "run"
    for name in ("config.json", "log.csv", "timing.csv", "checkpoint.json"):
        assert (run / name).exists()
    log = rows(run / "log.csv")
    assert [r["epoch"] for r in log] == ["1"]
    assert float(log[0]["val_rel_l2"]) > 0
    cfg = RunConfig.load(run / "config.json")
    assert cfg.benchmark == "beam2d" and cfg.seed == 0


def test_train_zero_epochs(tmp_path):
    cfg = small_config(tmp_path / "c.json", epochs=0)
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "r")]) == 0
    assert (tmp_path / "r" / "checkpoint.json").exists()


def test_eval_writes_metrics(trained, tmp_path):
    ckpt = trained / "run" / "checkpoint.json"
    assert main(["eval", "--checkpoint", str(ckpt), "--config", str(trained / "cfg.json"), "--out", str(tmp_path)]) == 0
    m = {r["field"]: float(r["relative_l2"]) for r in rows(tmp_path / "metrics.csv")}
    assert set(m) == {"u", "v", "sigma_v"}
    assert all(np.isfinite(v) and v > 0 for v in m.values())
    assert len(rows(tmp_path / "fields.csv")) == 40


def test_eval_on_generated_dataset(trained, tmp_path):
    assert main(["gen", "--config", str(trained / "cfg.json"), "--out", str(tmp_path / "data")]) == 0
    ckpt = trained / "run" / "checkpoint.json"
    assert main(["eval", "--checkpoint", str(ckpt), "--dataset", str(tmp_path / "data"), "--out", str(tmp_path / "e")]) == 0
    a = rows(tmp_path / "e" / "fields.csv")
    assert len(a) == 40


@pytest.mark.parametrize("res", ["25x10", "40x16", "100x40"])
def test_query_resolutions(trained, tmp_path, res):
    nx, ny = map(int, res.split("x"))
    ckpt = trained / "run" / "checkpoint.json"
    assert main(["query", "--checkpoint", str(ckpt), "--resolution", res, "--out", str(tmp_path)]) == 0
    out = rows(tmp_path / "query.csv")
    assert len(out) == nx * ny
    xs = sorted({float(r["x"]) for r in out})
    ys = sorted({float(r["y"]) for r in out})
    assert xs[0] == 0.0 and xs[-1] == 5.0 and ys[0] == -0.5 and ys[-1] == 0.5
    assert set(out[0]) == {"x", "y", "u", "v", "sigma_x", "sigma_y", "tau_xy"}


def test_query_points_file_matches_grid(trained, tmp_path):
    ckpt = trained / "run" / "checkpoint.json"
    main(["query", "--checkpoint", str(ckpt), "--resolution", "25x10", "--out", str(tmp_path / "g")])
    grid = rows(tmp_path / "g" / "query.csv")
    pts = tmp_path / "pts.csv"
    pts.write_text("x,y\n" + "".join(f"{r['x']},{r['y']}\n" for r in grid[::7]))
    assert main(["query", "--checkpoint", str(ckpt), "--points", str(pts), "--out", str(tmp_path / "p")]) == 0
    listed = rows(tmp_path / "p" / "query.csv")
    assert [r["u"] for r in listed] == [r["u"] for r in grid[::7]]


def test_export_attention_rows_sum_to_one(trained, tmp_path):
    ckpt = trained / "run" / "checkpoint.json"
    assert main(["export-attn", "--checkpoint", str(ckpt), "--resolution", "3x2", "--out", str(tmp_path)]) == 0
    sums = {}
    for r in rows(tmp_path / "attention.csv"):
        key = (r["layer"], r["head"], r["query"])
        sums[key] = sums.get(key, 0.0) + float(r["weight"])
    model_cfg = json.loads(ckpt.read_text())["meta"]["model"]
    assert len(sums) == model_cfg["n_decoder"] * model_cfg["n_head"] * 6
    np.testing.assert_allclose(list(sums.values()), 1.0, atol=1e-12)


def test_exit_code_config_errors(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"benchmark": "poisson", "train": {"nonsense": 1}}))
    assert main(["train", "--config", str(bad), "--out", str(tmp_path / "r")]) == 2
    bad.write_text(json.dumps({"benchmark": "darcy"}))
    assert main(["gen", "--config", str(bad), "--out", str(tmp_path / "g")]) == 2
    bad.write_text("{not json")  # malformed config text counts as a config error
    assert main(["train", "--config", str(bad), "--out", str(tmp_path / "r")]) == 2
    bad.write_text(json.dumps({"benchmark": "poisson", "model": {"n_head": 3}}))
    assert main(["train", "--config", str(bad), "--out", str(tmp_path / "r")]) == 2


def test_exit_code_bad_resolution(trained, tmp_path):
    ckpt = trained / "run" / "checkpoint.json"
    assert main(["query", "--checkpoint", str(ckpt), "--resolution", "40by16", "--out", str(tmp_path)]) == 2


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_exit_code_divergence(tmp_path):
    cfg = small_config(tmp_path / "c.json", lr=1e300, epochs=3, steps_per_epoch=2)
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "r")]) == 3
    # the last good parameters are still saved
    assert (tmp_path / "r" / "checkpoint.json").exists()


def test_exit_code_io(tmp_path):
    assert main(["eval", "--checkpoint", str(tmp_path / "missing.json"), "--out", str(tmp_path)]) == 4
    junk = tmp_path / "junk.json"
    junk.write_text("[]")
    assert main(["query", "--checkpoint", str(junk), "--resolution", "2x2", "--out", str(tmp_path)]) == 4


def test_seed_and_precision_flags(tmp_path):
    cfg = small_config(tmp_path / "c.json", epochs=0)
    assert main(["train", "--config", str(cfg), "--seed", "7", "--precision", "32", "--out", str(tmp_path / "r")]) == 0
    saved = RunConfig.load(tmp_path / "r" / "config.json")
    assert saved.seed == 7 and saved.precision == 32
    B.set_precision(64)


def test_config_round_trip(tmp_path):
    cfg = RunConfig(benchmark="ambiguity", seed=3, train={"lr": 1e-4})
    cfg.dump(tmp_path / "c.json")
    again = RunConfig.load(tmp_path / "c.json")
    assert again == cfg
    assert again.train_config().lr == 1e-4
