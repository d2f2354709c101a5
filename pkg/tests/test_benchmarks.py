import math

import numpy as np
import pytest

from mmet import benchmarks as bm
from mmet.conditions import encode_bc_vector


def test_poisson_oracle_values():
    u, f = bm.poisson_oracle(0.5, 0.5)
    assert u == pytest.approx(1.0)
    assert f == pytest.approx(-2 * math.pi**2)
    assert f == pytest.approx(-19.739, abs=1e-3)
    edge = np.array([[0, 0.3], [1, 0.7], [0.2, 0], [0.9, 1]])
    u, _ = bm.poisson_oracle(edge[:, 0], edge[:, 1])
    np.testing.assert_allclose(u, 0.0, atol=1e-15)
    with pytest.raises(bm.DomainError):
        bm.poisson_oracle(1.1, 0.5)


def test_poisson_grids():
    train, test = bm.poisson_grids()
    assert len(train) == 2500 and len(test) == 10000
    for g in (train, test):
        assert (g == [0.0, 0.0]).all(axis=1).any()
        assert (g == [1.0, 1.0]).all(axis=1).any()


def test_poisson_mesh_conditions():
    mesh = bm.poisson_mesh(5)
    mask = mesh.conditions.mask()
    assert mask[:, 0].all()  # source everywhere
    assert mask[:, 1].sum() == 16  # boundary of a 5x5 grid


def test_lame_constants():
    mu, lam = bm.lame_constants(20.0, 0.3)
    assert mu == pytest.approx(7.6923, abs=1e-4)
    assert lam == pytest.approx(11.538, abs=1e-3)
    assert bm.lame_constants(20.0, 0.0) == (10.0, 0.0)
    with pytest.raises(ValueError):
        bm.lame_constants(1.0, 0.5)


def test_beam_oracle_examples(rng):
    spec = bm.BeamSpec()
    out = bm.beam_oracle(rng.uniform(0, 5, 20), np.zeros(20), spec)
    np.testing.assert_array_equal(out[:, 0], 0.0)
    np.testing.assert_array_equal(out[:, 2], 0.0)
    assert bm.beam_oracle(1.0, 0.5, spec)[2] == pytest.approx(6.0)
    with pytest.raises(bm.DomainError):
        bm.beam_oracle(1.0, 0.6, spec)
    with pytest.raises(ValueError):
        bm.BeamSpec(nu=0.5)


def test_beam_oracle_displacement_vs_stress(rng):
    """Hooke's law on the displacement gradients: zero sigma_y and tau_xy, and
    sigma_x equal to the stated stress divided by L (the displacement formula
    carries an extra 1/L; both are kept as stated)."""
    spec = bm.BeamSpec(M=1.3)
    mu, lam = bm.lame_constants(spec.E, spec.nu)
    x, y = rng.uniform(0.5, 4.5, 50), rng.uniform(-0.4, 0.4, 50)
    d = 1e-5
    f = lambda xx, yy: bm.beam_oracle(xx, yy, spec)
    ux = (f(x + d, y)[:, 0] - f(x - d, y)[:, 0]) / (2 * d)
    vy = (f(x, y + d)[:, 1] - f(x, y - d)[:, 1]) / (2 * d)
    uy = (f(x, y + d)[:, 0] - f(x, y - d)[:, 0]) / (2 * d)
    vx = (f(x + d, y)[:, 1] - f(x - d, y)[:, 1]) / (2 * d)
    sx = (2 * mu + lam) * ux + lam * vy
    sy = lam * ux + (2 * mu + lam) * vy
    txy = mu * (uy + vx)
    out = f(x, y)
    np.testing.assert_allclose(sx * spec.L, out[:, 2], atol=1e-6)
    np.testing.assert_allclose(sy, 0.0, atol=1e-6)
    np.testing.assert_allclose(txy, 0.0, atol=1e-6)


def test_beam_mesh_and_dataset():
    spec = bm.BeamSpec()
    mesh = bm.beam_mesh(spec)
    assert len(mesh) == 5404
    mask = mesh.conditions.mask()
    assert mask[:, 0].all()
    assert mask[:, 1].sum() == 28
    right = mesh.nodes[:, 0] == 5.0
    t = mesh.conditions.values["neumann"][right, 0]
    np.testing.assert_allclose(t, 12 * mesh.nodes[right, 1])
    tr, te = bm.beam_dataset(3, n_train=5, n_train_points=100, n_test=2, n_test_points=50)
    tr2, _ = bm.beam_dataset(3, n_train=5, n_train_points=100, n_test=2, n_test_points=50)
    np.testing.assert_array_equal(tr.moments, tr2.moments)
    np.testing.assert_array_equal(tr.points[4], tr2.points[4])
    assert ((tr.moments >= 0.5) & (tr.moments <= 1.5)).all()
    for pts in tr.points + te.points:
        assert (pts[:, 0] >= 0).all() and (pts[:, 0] <= 5).all() and (np.abs(pts[:, 1]) <= 0.5).all()
    inst = tr.instance(2)
    assert inst.labels.shape == (100, 5) and inst.params["M"] == tr.moments[2]


def test_default_beam_dataset_counts():
    tr, te = bm.beam_dataset(0)
    assert len(tr) == 1000 and len(tr.points[0]) == 1000
    assert len(te) == 100 and len(te.points[0]) == 5000


def test_t_bottom():
    assert bm.t_bottom(2.5, 2.0) == pytest.approx(12.5)
    assert bm.t_bottom(0.0, 1.0) == pytest.approx(12.5)


def test_heatsink_geometry_and_instance():
    spec = bm.HeatsinkSpec()
    fins = spec.fins()
    assert len(fins) == 4 and fins[0] == (0.375, 0.875)
    inst = bm.heatsink_instance(2.0, 1.0, spec, np.random.default_rng(0), 64, 32)
    ex = inst.extra
    assert inst.labels is None
    np.testing.assert_allclose(ex["bottom"][:, 1], 0.0)
    np.testing.assert_allclose(ex["top"][:, 1], 2.0)
    np.testing.assert_allclose(ex["bottom_values"], bm.t_bottom(ex["bottom"][:, 0], 1.0))
    assert inst.domain.contains(ex["collocation"]).all()
    assert inst.domain.contains(ex["other"]).all()
    np.testing.assert_allclose(np.linalg.norm(ex["other_normals"], axis=1), 1.0)
    with pytest.raises(bm.DomainError):
        spec.domain(0.3)


def test_heatsink_sampler_reproducible():
    a = bm.heatsink_sampler(bm.HeatsinkSpec(), 5)
    b = bm.heatsink_sampler(bm.HeatsinkSpec(), 5)
    assert [next(a) for _ in range(4)] == [next(b) for _ in range(4)]


@pytest.mark.parametrize("top", ["dirichlet", "neumann"])
def test_fd_solver_against_series(top):
    """Fin-less plate: second-order convergence away from the insulated corners."""
    errs = []
    for step in (0.125, 0.0625):
        spec = bm.HeatsinkSpec(n_fins=1, fin_width=5.0, mesh_step=step)
        nodes, T = bm.solve_heat_fd(spec, 2.0, 1.0, top)
        sel = (nodes[:, 0] > 1) & (nodes[:, 0] < 4) & (nodes[:, 1] > 0)
        ref = bm.rect_heat_series(nodes[sel, 0], nodes[sel, 1], 5.0, 2.0, 1.0, top, 400)
        errs.append(np.abs(T[sel] - ref).max() / np.abs(ref).max())
    assert errs[0] < 1e-3
    assert errs[0] / errs[1] > 3.0


def test_fd_solver_needs_aligned_geometry():
    with pytest.raises(bm.DomainError):
        bm.solve_heat_fd(bm.HeatsinkSpec(), 2.05, 1.0)


def test_series_boundary_values():
    x = np.linspace(0.1, 4.9, 7)
    np.testing.assert_allclose(bm.rect_heat_series(x, np.zeros(7), 5.0, 1.0, 1.0, n_terms=4000), bm.t_bottom(x, 1.0), atol=2e-3)
    np.testing.assert_allclose(bm.rect_heat_series(x, np.ones(7), 5.0, 1.0, 1.0), 0.0, atol=1e-12)


def test_ambiguity_dataset_pairs():
    insts = bm.ambiguity_dataset(0)
    assert len(insts) == 10
    for d, n in zip(insts[:5], insts[5:]):
        assert d.params["top"] == "dirichlet" and n.params["top"] == "neumann"
        assert (d.params["H"], d.params["a"]) == (n.params["H"], n.params["a"])
        np.testing.assert_array_equal(d.mesh.nodes, n.mesh.nodes)
        np.testing.assert_array_equal(d.mesh.conditions.raw(), n.mesh.conditions.raw())
        top = bm.top_nodes(d)
        for i in top:
            np.testing.assert_array_equal(encode_bc_vector(d.mesh.conditions.record(i)), np.zeros(5))
            np.testing.assert_array_equal(encode_bc_vector(n.mesh.conditions.record(i)), np.zeros(5))
        assert (d.mesh.conditions.mask()[top] != n.mesh.conditions.mask()[top]).all()
        # the two halves have genuinely different solutions
        assert np.linalg.norm(d.labels - n.labels) > 0.2 * np.linalg.norm(d.labels)
        np.testing.assert_allclose(d.labels[top], 0.0, atol=1e-12)


def test_generate_is_byte_reproducible(tmp_path):
    for run in ("a", "b"):
        bm.generate("beam2d", 4, tmp_path / run, n_train=3, n_train_points=20, n_test=2, n_test_points=10)
    for name in ("manifest.json", "mesh.json", "labels_train.csv", "labels_test.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    splits = bm.load_dataset(tmp_path / "a")
    assert len(splits["train"]) == 3 and splits["train"][0].labels.shape == (20, 5)
    tr, _ = bm.beam_dataset(4, n_train=3, n_train_points=20, n_test=2, n_test_points=10)
    np.testing.assert_array_equal(splits["train"][1].labels, tr.instance(1).labels)


def test_generate_poisson_and_ambiguity(tmp_path):
    man = bm.generate("poisson", 0, tmp_path / "p")
    assert man["fields"] == ["u"]
    splits = bm.load_dataset(tmp_path / "p")
    assert len(splits["train"][0].queries) == 2500 and len(splits["test"][0].queries) == 10000
    bm.generate("ambiguity", 0, tmp_path / "a")
    amb = bm.load_dataset(tmp_path / "a")["train"]
    ref = bm.ambiguity_dataset(0)
    np.testing.assert_array_equal(amb[7].labels, ref[7].labels)
    with pytest.raises(ValueError):
        bm.generate("darcy", 0, tmp_path / "x")
