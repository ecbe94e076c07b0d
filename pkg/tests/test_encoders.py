import numpy as np
import pytest

from modalsurv.core import DimensionMismatchError, ZeroNormError, finite_difference_check
from modalsurv.encoders import (
    EncoderConfig,
    EmbeddingTriplet,
    encode_expression,
    encode_modalities,
    encode_volume,
    init_encoder_params,
    patchify,
    project,
    project_triplet,
)
from modalsurv.tensor import Tensor

TOY = dict(volume_shape=(8, 16, 16), volume_patch_size=(4, 8, 8), model_width=16, num_heads=2,
           gene_count=12, rna_hidden_layers=(8,), projection_dim=6)


def toy_params(dtype=np.float64, **kw):
    cfg = EncoderConfig(**{**TOY, **kw})
    return cfg, init_encoder_params(cfg, dtype=dtype)


def test_config_bounds():
    with pytest.raises(ValueError):
        EncoderConfig(rna_hidden_layers=(8,) * 7)
    with pytest.raises(ValueError):
        EncoderConfig(volume_shape=(10, 64, 64))
    assert len(EncoderConfig(rna_hidden_layers=(8,) * 6).rna_hidden_layers) == 6
    assert EncoderConfig().num_patches == 64


def test_patchify_roundtrip_layout():
    v = np.arange(2 * 4 * 4 * 4, dtype=float).reshape(2, 4, 4, 4)
    tokens = patchify(v, (2, 2, 2))
    assert tokens.shape == (2, 8, 8)
    np.testing.assert_array_equal(tokens[0, 0], v[0, :2, :2, :2].ravel())
    np.testing.assert_array_equal(tokens[1, -1], v[1, 2:, 2:, 2:].ravel())
    with pytest.raises(DimensionMismatchError):
        patchify(v, (3, 2, 2))


def test_zero_volume_with_zero_final_layer():
    cfg, params = toy_params()
    params["ct.final.w"][:] = 0
    params["ct.final.b"][:] = 0
    out = encode_volume(np.zeros(cfg.volume_shape), params, cfg, "ct").data
    np.testing.assert_array_equal(out, np.zeros(cfg.model_width))


def test_volume_determinism_and_sensitivity(rng):
    cfg, params = toy_params()
    v = rng.standard_normal(cfg.volume_shape)
    a = encode_volume(v, params, cfg, "ct").data
    b = encode_volume(v.copy(), init_encoder_params(cfg, np.float64), cfg, "ct").data
    np.testing.assert_array_equal(a, b)
    assert a.shape == (cfg.model_width,)
    w = v.copy()
    w[3, 5, 7] += 1.0
    assert not np.allclose(encode_volume(w, params, cfg, "ct").data, a)


def test_ct_and_pet_weights_differ():
    cfg, params = toy_params()
    assert not np.array_equal(params["ct.patch.w"], params["pet.patch.w"])


def test_volume_batch_matches_single(rng):
    cfg, params = toy_params(transformer_blocks=1)
    vols = rng.standard_normal((3, *cfg.volume_shape))
    batch = encode_volume(vols, params, cfg, "pet").data
    for i in range(3):
        np.testing.assert_allclose(batch[i], encode_volume(vols[i], params, cfg, "pet").data, atol=1e-12)


def test_volume_shape_mismatch():
    cfg, params = toy_params()
    with pytest.raises(DimensionMismatchError):
        encode_volume(np.zeros((8, 16, 8)), params, cfg)


def test_expression_examples():
    cfg, params = toy_params()
    for k in params:
        if k.startswith("rna.") and k.endswith(".b"):
            params[k][:] = 0
    np.testing.assert_array_equal(encode_expression(np.zeros(12), params, cfg).data, np.zeros(16))
    ident = EncoderConfig(**{**TOY, "gene_count": 2, "model_width": 2, "num_heads": 1, "rna_hidden_layers": ()})
    p = {"rna.fc0.w": np.eye(2), "rna.fc0.b": np.zeros(2)}
    np.testing.assert_array_equal(encode_expression([1.0, 2.0], p, ident).data, [1.0, 2.0])
    with pytest.raises(DimensionMismatchError):
        encode_expression(np.zeros(5), params, cfg)


def test_expression_reproducible(rng):
    cfg, _ = toy_params()
    x = rng.standard_normal(12)
    a = encode_expression(x, init_encoder_params(cfg), cfg).data
    b = encode_expression(x, init_encoder_params(cfg), cfg).data
    np.testing.assert_array_equal(a, b)
    other = init_encoder_params(EncoderConfig(**{**TOY, "seed": 1}))
    assert not np.array_equal(encode_expression(x, other, cfg).data, a)


def test_project_examples(rng):
    u = np.array([0.6, 0.8, 0.0])
    np.testing.assert_allclose(project(u, np.eye(3)).data, u)
    w = rng.standard_normal((5, 4))
    x = rng.standard_normal(5)
    out = project(x, w).data
    assert np.linalg.norm(out) == pytest.approx(1.0, abs=1e-12)
    np.testing.assert_allclose(project(5 * x, w).data, out, atol=1e-12)
    with pytest.raises(ZeroNormError):
        project(np.zeros(5), w)
    with pytest.raises(DimensionMismatchError):
        project(np.ones(4), w)


def test_project_triplet_and_modalities(rng):
    cfg, params = toy_params()
    e = EmbeddingTriplet(*(rng.standard_normal((3, 16)) for _ in range(3)))
    out = project_triplet(e, params)
    for part in out.as_tuple():
        assert part.shape == (3, cfg.projection_dim)
        np.testing.assert_allclose(np.linalg.norm(part, axis=1), 1.0, atol=1e-6)
    t, p, r = encode_modalities(params, cfg, rng.standard_normal((2, *cfg.volume_shape)),
                                rng.standard_normal((2, *cfg.volume_shape)), rng.standard_normal((2, 12)))
    for part in (t, p, r):
        np.testing.assert_allclose(np.linalg.norm(part.data, axis=1), 1.0, atol=1e-6)


@pytest.mark.parametrize("name", ["ct.patch.w", "ct.block0.qkv.w", "ct.block0.ln2.g", "ct.pos", "proj.ct.w"])
def test_volume_gradients(name, rng):
    cfg, params = toy_params(transformer_blocks=1)
    vols = rng.standard_normal((2, *cfg.volume_shape))
    target = rng.standard_normal((2, cfg.projection_dim))

    def loss(p):
        z = project(encode_volume(vols, p, cfg, "ct"), p["proj.ct.w"])
        return (z * target).sum()

    tensors = {k: Tensor(v, requires_grad=True) for k, v in params.items()}
    loss(tensors).backward()

    def f(x):
        return float(loss({**params, name: x}).data)

    assert finite_difference_check(f, tensors[name].grad, params[name]) < 1e-4


@pytest.mark.parametrize("name", ["rna.fc0.w", "rna.fc1.b", "proj.rna.w"])
def test_expression_gradients(name, rng):
    cfg, params = toy_params()
    x = rng.standard_normal((3, 12))
    target = rng.standard_normal((3, cfg.projection_dim))

    def loss(p):
        return (project(encode_expression(x, p, cfg), p["proj.rna.w"]) * target).sum()

    tensors = {k: Tensor(v, requires_grad=True) for k, v in params.items()}
    loss(tensors).backward()
    assert finite_difference_check(lambda w: float(loss({**params, name: w}).data), tensors[name].grad, params[name]) < 1e-4
