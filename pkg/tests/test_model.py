import numpy as np
import pytest

from mmet import backend as B
from mmet import model as M
from mmet.conditions import ConditionSchema, NodeConditions
from mmet.geometry import Mesh

SCHEMA = ConditionSchema((("dirichlet", 1), ("source", 1)))


def random_mesh(rng, n=120):
    nodes = rng.uniform(size=(n, 2))
    cond = NodeConditions(SCHEMA, n)
    cond.set("source", np.arange(n), rng.standard_normal((n, 1)))
    cond.set("dirichlet", np.arange(0, n, 7), 0.0)
    return Mesh(nodes, cond, np.array([[0.0, 0.0], [1.0, 1.0]]))


def small_cfg(**kw):
    base = dict(d_emb=8, patch_size=4, d_model=16, n_encoder=1, n_decoder=2, n_head=2)
    base.update(kw)
    return M.ModelConfig(**base)


def test_presets_match_reference_rows():
    p = M.preset("poisson")
    assert (p.d_emb, p.patch_size, p.order, p.d_model, p.n_encoder, p.n_decoder, p.n_head) == (16, 4, 16, 32, 2, 2, 1)
    b = M.preset("beam2d")
    assert (b.d_emb, b.patch_size, b.d_model, b.n_head) == (32, 128, 128, 2)
    h = M.preset("heat2d", encoder_only=True)
    assert h.encoder_only and h.n_encoder == 4 and h.n_decoder == 0 and h.d_model == 192
    with pytest.raises(KeyError):
        M.preset("nope")


def test_config_validation_and_round_trip():
    cfg = small_cfg(attention="linear", output_scale=[2.0], out_dim=1)
    assert M.ModelConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError):
        small_cfg(d_model=15)
    with pytest.raises(ValueError):
        small_cfg(attention="flash")
    with pytest.raises(KeyError):
        M.ModelConfig.from_dict({"width": 3})


def test_wavelet_values():
    x = B.Tensor(np.array([0.0, np.pi / 2]))
    np.testing.assert_allclose(M.wavelet(x, 2.0, 3.0).data, [3.0, 2.0], atol=1e-15)


def test_dot_attention_matches_direct_formula(rng):
    q, k, v = (rng.standard_normal(s) for s in ((2, 5, 4), (2, 7, 4), (2, 7, 4)))
    out, w = M.attention(B.Tensor(q), B.Tensor(k), B.Tensor(v), "dot", return_weights=True)
    s = np.einsum("hmd,htd->hmt", q, k) / 2.0
    ref_w = np.exp(s - s.max(-1, keepdims=True))
    ref_w /= ref_w.sum(-1, keepdims=True)
    np.testing.assert_allclose(w, ref_w, rtol=1e-12)
    np.testing.assert_allclose(out.data, ref_w @ v, rtol=1e-12)


def test_linear_attention_matches_kernel_formula(rng):
    q, k, v = (rng.standard_normal(s) for s in ((1, 5, 3), (1, 6, 3), (1, 6, 3)))
    out, w = M.attention(B.Tensor(q), B.Tensor(k), B.Tensor(v), "linear", return_weights=True)

    def fmap(x):
        e = np.exp(x - x.max(-1, keepdims=True))
        return e / e.sum(-1, keepdims=True)

    kern = fmap(q[0]) @ fmap(k[0]).T
    ref_w = kern / kern.sum(-1, keepdims=True)
    np.testing.assert_allclose(w[0], ref_w, rtol=1e-12)
    np.testing.assert_allclose(out.data[0], ref_w @ v[0], rtol=1e-12)
    np.testing.assert_allclose(w.sum(-1), 1.0, atol=1e-12)


def test_chunked_untaped_attention_is_exact(rng, monkeypatch):
    model = M.MMET(small_cfg(), SCHEMA, seed=3)
    mesh = random_mesh(rng)
    q = rng.uniform(size=(50, 2))
    ref = model.predict(mesh, q)
    monkeypatch.setattr(M, "ATTENTION_CHUNK", 7)
    np.testing.assert_array_equal(model.predict(mesh, q), ref)


@pytest.mark.parametrize("kind", ["dot", "linear"])
def test_query_batch_invariance(rng, kind):
    model = M.MMET(small_cfg(attention=kind), SCHEMA, seed=1)
    mesh = random_mesh(rng)
    q = rng.uniform(size=(30, 2))
    full = model.predict(mesh, q)
    for bs in (1, 4, 13):
        np.testing.assert_array_equal(model.predict(mesh, q, bs), full)


def test_node_order_invariance(rng):
    model = M.MMET(small_cfg(), SCHEMA, seed=2)
    mesh = random_mesh(rng)
    q = rng.uniform(size=(20, 2))
    perm = rng.permutation(len(mesh))
    np.testing.assert_allclose(model.predict(mesh.permuted(perm), q), model.predict(mesh, q), atol=1e-12)


def test_conditions_change_the_output(rng):
    model = M.MMET(small_cfg(), SCHEMA, seed=2)
    mesh = random_mesh(rng)
    q = rng.uniform(size=(5, 2))
    other = mesh.permuted(np.arange(len(mesh)))
    other.conditions.set("dirichlet", [1], 0.0)
    assert np.abs(model.predict(other, q) - model.predict(mesh, q)).max() > 0


def test_encoder_only_returns_node_outputs_in_input_order(rng):
    cfg = M.preset("poisson", encoder_only=True, d_emb=8, d_model=8, n_encoder=1)
    model = M.MMET(cfg, SCHEMA, seed=0)
    mesh = random_mesh(rng, 50)
    out = model.predict(mesh)
    assert out.shape == (50, 1)
    perm = rng.permutation(50)
    np.testing.assert_allclose(model.predict(mesh.permuted(perm)), out[perm], atol=1e-12)
    with pytest.raises(RuntimeError):
        model.decode(np.zeros((1, 2)), None, mesh.bbox)


def test_schema_mismatch_rejected(rng):
    model = M.MMET(small_cfg(), ConditionSchema((("other", 1),)), seed=0)
    with pytest.raises(ValueError):
        model.predict(random_mesh(rng), np.zeros((1, 2)))


def test_output_scale_multiplies_head(rng):
    mesh = random_mesh(rng)
    q = rng.uniform(size=(4, 2))
    a = M.MMET(small_cfg(), SCHEMA, seed=5).predict(mesh, q)
    b = M.MMET(small_cfg(output_scale=[3.0]), SCHEMA, seed=5).predict(mesh, q)
    np.testing.assert_allclose(b, 3.0 * a, rtol=1e-12)


def test_decoder_attention_rows_sum_to_one(rng):
    model = M.MMET(small_cfg(), SCHEMA, seed=1)
    mesh = random_mesh(rng)
    with B.no_grad():
        _, w = model.decode(rng.uniform(size=(9, 2)), model.encode(mesh), mesh.bbox, return_attention=True)
    assert len(w) == 2 and w[0].shape == (2, 9, 30)
    for wl in w:
        np.testing.assert_allclose(wl.sum(-1), 1.0, atol=1e-12)


def test_wavelets_initialised_to_one():
    model = M.MMET(small_cfg(), SCHEMA, seed=0)
    acts = model.wavelets()
    assert len(acts) == 3 + 1 + 2
    for a in acts:
        assert a.w1.item() == 1.0 and a.w2.item() == 1.0


def test_save_load_model(tmp_path, rng):
    model = M.MMET(small_cfg(attention="linear"), SCHEMA, seed=4)
    path = tmp_path / "m.json"
    M.save_model(model, path, note=1)
    back, meta = M.load_model(path)
    assert meta["note"] == 1 and back.cfg == model.cfg and back.schema == SCHEMA
    mesh = random_mesh(rng)
    q = rng.uniform(size=(6, 2))
    np.testing.assert_array_equal(back.predict(mesh, q), model.predict(mesh, q))


def test_float32_forward(rng):
    B.set_precision(32)
    model = M.MMET(small_cfg(), SCHEMA, seed=0)
    out = model.predict(random_mesh(rng), rng.uniform(size=(3, 2)))
    assert out.dtype == np.float32
