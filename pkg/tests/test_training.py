import math

import numpy as np
import pytest

from mmet import backend as B
from mmet import benchmarks as bm
from mmet import training as T
from mmet.backend import Parameter, Tensor
from mmet.geometry import rectangle


def test_relative_l2_examples():
    assert T.relative_l2(np.array([1.0, 2.0]), np.array([1.0, 2.0])) == 0.0
    assert T.relative_l2(np.zeros(2), np.array([3.0, 4.0])) == pytest.approx(1.0)
    truth = np.array([[1.0, 0.0], [0.0, 1.0]])
    pred = np.array([[1.2, 0.0], [0.0, 1.4]])
    assert T.relative_l2(pred, truth) == pytest.approx(0.3)
    with pytest.raises(ValueError):
        T.relative_l2(np.ones(2), np.zeros(2))
    with pytest.raises(ValueError):
        T.relative_l2(np.ones(2), np.ones(3))


def test_relative_l2_scale_covariant(rng):
    p, t = rng.standard_normal((3, 10)), rng.standard_normal((3, 10))
    assert T.relative_l2(-2.5 * p, -2.5 * t) == pytest.approx(T.relative_l2(p, t), rel=1e-12)


def test_mse_data_loss_value_and_gradient():
    p = Parameter(np.array([[2.0], [3.0]]))
    loss = T.mse_data_loss(p, [[1.0], [2.0]])
    assert loss.item() == 2.0
    g = B.grad(loss, [p])
    np.testing.assert_array_equal(list(g.values())[0], [[2.0], [2.0]])
    with pytest.raises(B.ShapeError):
        T.mse_data_loss(p, [1.0, 2.0, 3.0])


def test_fd_laplacian_exact_for_quadratics():
    pts = np.array([[0.3, 0.4], [0.5, 0.5]])
    lap, c = T.fd_laplacian(lambda p: (p**2).sum(axis=1, keepdims=True), pts, 1e-2)
    np.testing.assert_allclose(lap.data, 4.0, rtol=1e-10)
    np.testing.assert_allclose(c.data.ravel(), [0.25, 0.5])
    lap, _ = T.fd_laplacian(lambda p: np.full((len(p), 1), 7.0), pts, 1e-3)
    np.testing.assert_array_equal(lap.data, 0.0)


def test_fd_laplacian_of_poisson_solution():
    u = lambda p: bm.poisson_oracle(p[:, 0], p[:, 1])[0].reshape(-1, 1)
    lap, _ = T.fd_laplacian(u, [[0.5, 0.5]], 1e-3)
    assert lap.item() == pytest.approx(-2 * math.pi**2, abs=1e-4)


def test_fd_laplacian_domain_and_step_errors():
    dom = rectangle(0, 0, 1, 1)
    with pytest.raises(T.StencilError):
        T.fd_laplacian(lambda p: p[:, :1], [[0.0005, 0.5]], 1e-3, dom)
    with pytest.raises(ValueError):
        T.fd_laplacian(lambda p: p[:, :1], [[0.5, 0.5]], 0.0)


def test_fd_normal_derivative_second_order():
    f = lambda p: (p[:, 0] ** 2 + 3 * p[:, 1]).reshape(-1, 1)
    dn, _ = T.fd_normal_derivative(f, [[1.0, 0.5], [0.5, 1.0]], [[1, 0], [0, 1]], 1e-2)
    np.testing.assert_allclose(dn.data.ravel(), [2.0, 3.0], rtol=1e-10)


class FieldModel:
    """Stand-in exposing encode/decode around a fixed field."""

    def __init__(self, fn):
        self.fn = fn

    def encode(self, mesh):
        return None

    def decode(self, points, memory, bbox):
        return Tensor(self.fn(np.asarray(points)).reshape(-1, 1))


def test_poisson_loss_with_exact_field():
    inst = bm.poisson_instance(mesh_n=12)
    exact = FieldModel(lambda p: bm.poisson_oracle(p[:, 0], p[:, 1])[0])
    _, terms = T.poisson_loss(exact, inst)
    assert terms["data"] == 0.0
    h = T.stencil_step(inst.mesh.bbox)
    assert terms["pde"] <= 1e4 * h**4 * inst.extra["interior"].sum()
    _, terms0 = T.poisson_loss(FieldModel(lambda p: np.zeros(len(p))), inst)
    assert terms0["data"] == pytest.approx(float((inst.labels**2).sum()))


def test_heatsink_loss_constant_field():
    spec = bm.HeatsinkSpec(t_top=2.0)
    inst = bm.heatsink_instance(2.0, 1.0, spec, np.random.default_rng(0), 32, 16)
    inst.extra["bottom_values"] = np.full_like(inst.extra["bottom_values"], 2.0)
    total, terms = T.heatsink_loss(FieldModel(lambda p: np.full(len(p), 2.0)), inst)
    assert terms["bottom"] == 0.0 and terms["top"] == 0.0
    assert terms["other"] < 1e-12 and terms["pde"] < 1e-6
    assert total.item() == pytest.approx(sum(terms.values()))


def test_adam_zero_gradient_keeps_params():
    p = Parameter(np.array([1.0, -2.0]))
    opt = T.Adam({"p": p}, lr=0.1)
    opt.step({"p": np.zeros(2)})
    np.testing.assert_array_equal(p.data, [1.0, -2.0])


def test_adam_first_step_by_hand():
    p = Parameter(np.array([1.0, 1.0, 1.0]))
    g = np.array([0.5, -2.0, 1e-9])
    T.Adam({"p": p}, lr=0.01).step({"p": g})
    # m_hat = g, v_hat = g^2 after bias correction
    expected = 1.0 - 0.01 * g / (np.abs(g) + 1e-8)
    np.testing.assert_allclose(p.data, expected, rtol=1e-12)


def test_adam_two_steps_by_hand():
    p = Parameter(np.array([0.0]))
    opt = T.Adam({"p": p}, lr=1.0)
    opt.step({"p": np.array([1.0])})
    opt.step({"p": np.array([3.0])})
    m = 0.9 * 0.1 * 1 + 0.1 * 3
    v = 0.999 * 0.001 * 1 + 0.001 * 9
    step2 = (m / (1 - 0.81)) / (math.sqrt(v / (1 - 0.999**2)) + 1e-8)
    step1 = 1.0 / (1.0 + 1e-8)
    assert p.data[0] == pytest.approx(-step1 - step2, rel=1e-12)


def test_adam_weight_decay_and_nonfinite():
    p = Parameter(np.array([2.0]))
    opt = T.Adam({"p": p}, lr=0.1, weight_decay=0.5)
    opt.step({"p": np.array([0.0])})
    assert p.data[0] == pytest.approx(2.0 - 0.1 * 0.5 * 2.0)
    with pytest.raises(B.NonFiniteError):
        opt.step({"p": np.array([np.nan])})


def test_adam_step_functional():
    p = Parameter(np.array([1.0]))
    state = T.adam_step({"p": p}, {"p": np.array([1.0])}, None, lr=0.1)
    state = T.adam_step({"p": p}, {"p": np.array([1.0])}, state, lr=0.1)
    assert state["t"] == 2
    assert p.data[0] == pytest.approx(0.8, rel=1e-6)


class Quadratic:
    def __init__(self):
        self.w = Parameter(np.array([3.0, -1.0]))

    def parameters(self):
        return {"w": self.w}

    def state_dict(self):
        return {"w": self.w.data.copy()}

    def load_state_dict(self, s):
        self.w.data = s["w"].copy()


def _quad_loss(model, item, rng):
    r = model.w - Tensor(np.array([1.0, 2.0]) + 0.01 * rng.standard_normal(2))
    loss = (r * r).sum()
    return loss, {"fit": loss.item()}


def _batches(epoch, rng):
    for _ in range(5):
        yield [None]


def test_train_zero_epochs_returns_initial():
    m = Quadratic()
    res = T.train(m, _quad_loss, _batches, T.TrainConfig(epochs=0))
    np.testing.assert_array_equal(res.best_state["w"], [3.0, -1.0])
    assert res.report.history == []


def test_train_is_deterministic_and_logs(tmp_path):
    runs = []
    for i in range(2):
        m = Quadratic()
        res = T.train(
            m, _quad_loss, _batches, T.TrainConfig(epochs=4, lr=0.1, seed=7),
            lambda mm: float(np.linalg.norm(mm.w.data - [1, 2])), tmp_path / f"log{i}.csv", tmp_path / f"t{i}.csv",
        )
        runs.append(res)
    assert runs[0].report.history == runs[1].report.history
    assert (tmp_path / "log0.csv").read_bytes() == (tmp_path / "log1.csv").read_bytes()
    header = (tmp_path / "log0.csv").read_text().splitlines()[0]
    assert header == "epoch,total,fit,val_rel_l2"
    assert (tmp_path / "t0.csv").read_text().startswith("epoch,wall_clock_s")
    vals = [h["val_rel_l2"] for h in runs[0].report.history]
    assert runs[0].best_val == min(vals)


def test_train_divergence_restores_last_good():
    m = Quadratic()

    calls = {"n": 0}

    def exploding(model, item, rng):
        calls["n"] += 1
        if calls["n"] == 3:
            raise B.NonFiniteError("boom")
        return (model.w * model.w).sum(), {}

    with pytest.raises(T.TrainingDiverged) as info:
        T.train(m, exploding, _batches, T.TrainConfig(epochs=2, lr=0.1))
    assert info.value.epoch == 1
    np.testing.assert_array_equal(m.w.data, info.value.state["w"])


def test_train_config():
    with pytest.raises(ValueError):
        T.TrainConfig(optimizer="lbfgs")
    with pytest.raises(KeyError):
        T.TrainConfig.from_dict({"momentum": 0.9})
    cfg = T.train_preset("darcy")
    assert cfg.lr == 1e-3 and cfg.epochs == 200


def test_cosine_schedule_endpoints_and_midpoint():
    cfg = T.TrainConfig(lr=0.01, epochs=5, schedule="cosine")
    # epoch 1 -> full rate, epoch 5 -> 2% floor, epoch 3 -> halfway: 0.01 * (0.02 + 0.98 * 0.5)
    assert T.epoch_lr(cfg, 1) == pytest.approx(0.01)
    assert T.epoch_lr(cfg, 3) == pytest.approx(0.0051)
    assert T.epoch_lr(cfg, 5) == pytest.approx(0.0002)
    assert T.epoch_lr(T.TrainConfig(lr=0.01, epochs=5), 4) == 0.01
    with pytest.raises(ValueError):
        T.TrainConfig(schedule="step")
