import struct
import zlib

import numpy as np
import pytest

from modalsurv.checkpoint import (
    Checkpoint,
    ChecksumError,
    CheckpointError,
    TruncatedError,
    VersionError,
    from_bytes,
    load_checkpoint,
    save_checkpoint,
    to_bytes,
)
from modalsurv.core import GradientRecord
from modalsurv.cpm import ClusterAssignments, PrototypeBank, cpm_loss
from modalsurv.data import SynthConfig, load_cohort, synthesize_cohort
from modalsurv.encoders import EncoderConfig
from modalsurv.mpe import ModalityBatch, mpe_loss
from modalsurv.pretrain import PretrainConfig, Pretrainer, combined_loss, embed_arrays, fine_tune_end_to_end, run_pretraining
from modalsurv.survival import SurvivalConfig, fuse_embeddings, train_cox_head

from .conftest import unit_rows

TINY_ENC = EncoderConfig(volume_shape=(4, 8, 8), volume_patch_size=(2, 4, 4), transformer_blocks=1,
                         model_width=8, num_heads=2, gene_count=20, rna_hidden_layers=(8,), projection_dim=8)


@pytest.fixture(scope="module")
def arrays(tmp_path_factory):
    def build(n):
        path = synthesize_cohort(tmp_path_factory.mktemp(f"c{n}"), SynthConfig(n=n, seed=2, shape=(4, 8, 8), gene_count=20))
        return load_cohort(path).load_arrays()

    return {8: build(8), 16: build(16)}


def cfg(**kw):
    base = dict(epochs=2, num_prototypes=4, learning_rate=1e-3)
    return PretrainConfig(**{**base, **kw})


def test_config_validation():
    with pytest.raises(ValueError):
        PretrainConfig(alpha1=0, alpha2=0)
    with pytest.raises(ValueError):
        PretrainConfig(alpha1=-1)
    with pytest.raises(ValueError):
        PretrainConfig(learning_rate=0)


def test_combined_loss_arithmetic(rng):
    a = GradientRecord(1.0, {"t": np.ones(2)})
    b = GradientRecord(2.0, {"t": np.full(2, 3.0), "prototypes": np.ones(2)})
    out = combined_loss(a, b, PretrainConfig(alpha1=0.5, alpha2=0.5))
    assert out.value == 1.5
    np.testing.assert_allclose(out.grads["t"], [2.0, 2.0])
    only = combined_loss(a, b, PretrainConfig(alpha1=1, alpha2=0))
    assert only.value == a.value
    np.testing.assert_array_equal(only.grads["prototypes"], 0.0)


def test_combined_loss_gradients_are_weighted_sums(rng):
    t, p, r = (unit_rows(rng, 5, 4) for _ in range(3))
    batch = ModalityBatch(t, p, r)
    m = mpe_loss(batch)
    c = cpm_loss(batch, PrototypeBank(unit_rows(rng, 3, 4)), ClusterAssignments(*(rng.integers(0, 3, 5) for _ in range(3)), 3))
    conf = PretrainConfig(alpha1=0.3, alpha2=1.7)
    out = combined_loss(m, c, conf)
    assert out.value == pytest.approx(0.3 * m.value + 1.7 * c.value)
    for key in "tpr":
        np.testing.assert_allclose(out.grads[key], 0.3 * m.grads[key] + 1.7 * c.grads[key], atol=1e-15)
    np.testing.assert_allclose(out.grads["prototypes"], 1.7 * c.grads["prototypes"])


def test_two_epochs_give_two_history_entries(arrays):
    ck = run_pretraining(arrays[8], TINY_ENC, cfg())
    assert ck.epoch == 2
    assert [h["epoch"] for h in ck.history] == [0, 1]
    for h in ck.history:
        assert all(np.isfinite(h[k]) for k in ("l_mpe", "l_cpm", "l_total"))
    np.testing.assert_allclose(np.linalg.norm(ck.params["prototypes"], axis=1), 1.0, atol=1e-6)


def test_same_seed_same_weights(arrays):
    a = run_pretraining(arrays[8], TINY_ENC, cfg())
    b = run_pretraining(arrays[8], TINY_ENC, cfg())
    assert a == b
    c = run_pretraining(arrays[8], TINY_ENC, cfg(seed=1))
    assert c != a


def test_resume_matches_uninterrupted(arrays, tmp_path):
    full = run_pretraining(arrays[8], TINY_ENC, cfg())
    first = run_pretraining(arrays[8], TINY_ENC, cfg(epochs=1))
    save_checkpoint(first, tmp_path / "e1.ckpt")
    resumed = run_pretraining(arrays[8], TINY_ENC, cfg(), resume=load_checkpoint(tmp_path / "e1.ckpt"))
    assert resumed == full


def test_mpe_only_ignores_cpm_settings(arrays):
    # with alpha2 = 0 the clustering term never reaches an update
    a = run_pretraining(arrays[8], TINY_ENC, cfg(alpha2=0.0, tau2=0.2))
    b = run_pretraining(arrays[8], TINY_ENC, cfg(alpha2=0.0, tau2=0.9))
    for k in a.params:
        if k != "prototypes":
            np.testing.assert_array_equal(a.params[k], b.params[k])
    assert [h["l_mpe"] for h in a.history] == [h["l_mpe"] for h in b.history]
    assert all(np.isfinite(h["l_cpm"]) for h in a.history)


def test_mpe_only_makes_progress(arrays):
    ck = run_pretraining(arrays[16], TINY_ENC, cfg(alpha2=0.0, epochs=31))
    assert ck.history[30]["l_mpe"] < ck.history[1]["l_mpe"]


def test_rejects_incomplete_and_empty(arrays):
    arr = arrays[8]
    partial = type(arr)(arr.ids, arr.ct, arr.pet, arr.rna, arr.present.copy(), arr.time, arr.event)
    partial.present[0, 2] = False
    with pytest.raises(ValueError, match="complete"):
        run_pretraining(partial, TINY_ENC, cfg())


# checkpoint format -------------------------------------------------------------


def fresh_checkpoint():
    trainer = Pretrainer(TINY_ENC, cfg())
    return trainer.to_checkpoint()


def test_roundtrip_fresh(tmp_path):
    ck = fresh_checkpoint()
    save_checkpoint(ck, tmp_path / "a.ckpt")
    assert load_checkpoint(tmp_path / "a.ckpt") == ck
    assert to_bytes(from_bytes(to_bytes(ck))) == to_bytes(ck)


def test_corrupted_byte_is_checksum_error():
    buf = bytearray(to_bytes(fresh_checkpoint()))
    buf[len(buf) // 2] ^= 0xFF
    with pytest.raises(ChecksumError):
        from_bytes(bytes(buf))


def test_newer_version_is_version_error():
    buf = bytearray(to_bytes(fresh_checkpoint())[:-4])
    struct.pack_into("<I", buf, 4, 99)
    buf += struct.pack("<I", zlib.crc32(bytes(buf)))
    with pytest.raises(VersionError):
        from_bytes(bytes(buf))


def test_bad_magic_and_truncation():
    buf = to_bytes(fresh_checkpoint())
    with pytest.raises(CheckpointError):
        from_bytes(b"XXXX" + buf[4:])
    with pytest.raises(TruncatedError):
        from_bytes(buf[:6])
    with pytest.raises(ChecksumError):
        from_bytes(buf[:-100])


def test_checkpoint_arrays_are_float32():
    ck = Checkpoint(params={"w": np.arange(3, dtype=np.float64)})
    assert ck.params["w"].dtype == np.float32


def test_fine_tune_first_step_matches_frozen_head(arrays):
    # On the first step the head sees the same inputs either way, so its Adam
    # update must agree with the frozen-embedding trainer.
    a = arrays[16]
    ckpt = run_pretraining(a, TINY_ENC, cfg(epochs=1))
    scfg = SurvivalConfig(epochs=1, learning_rate=1e-3, hidden=4)
    enc_params, tuned = fine_tune_end_to_end(a, ckpt, scfg)
    fused = fuse_embeddings(*embed_arrays(ckpt.params, TINY_ENC, a.ct, a.pet, a.rna))
    frozen = train_cox_head(fused, (a.time, a.event), scfg)
    for k, v in frozen.head.params().items():
        np.testing.assert_allclose(tuned.head.params()[k], v, atol=1e-6)
    assert tuned.losses[0] == pytest.approx(frozen.losses[0], rel=1e-5)
    np.testing.assert_array_equal(enc_params["prototypes"], ckpt.params["prototypes"])
    moved = [k for k in enc_params if k != "prototypes" and not np.array_equal(enc_params[k], ckpt.params[k])]
    assert "proj.ct.w" in moved and "proj.rna.w" in moved
    assert all(v.dtype == np.float32 for v in enc_params.values())


def test_fine_tune_lowers_training_loss(arrays):
    a = arrays[16]
    ckpt = run_pretraining(a, TINY_ENC, cfg(epochs=1))
    _, tuned = fine_tune_end_to_end(a, ckpt, SurvivalConfig(epochs=20, learning_rate=1e-2, hidden=0))
    assert tuned.losses[-1] < tuned.losses[0]


def test_fine_tune_requires_complete_triplets(arrays):
    a = arrays[8]
    ckpt = run_pretraining(a, TINY_ENC, cfg(epochs=1))
    present = a.present.copy()
    present[0, 2] = False
    broken = type(a)(a.ids, a.ct, a.pet, a.rna, present, a.time, a.event)
    with pytest.raises(ValueError, match="complete"):
        fine_tune_end_to_end(broken, ckpt, SurvivalConfig(epochs=1))
