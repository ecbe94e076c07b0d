import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from modalsurv.data import (
    CohortError,
    ImputationRegressor,
    SynthConfig,
    impute_missing_modality,
    load_cohort,
    make_folds,
    preprocess_volume,
    read_expression,
    read_volume,
    resample_volume,
    synthesize_cohort,
    write_expression,
    write_volume,
)
from modalsurv.metrics import concordance_index

SMALL = dict(shape=(4, 8, 8), gene_count=20)


@pytest.fixture
def cohort(tmp_path):
    return synthesize_cohort(tmp_path / "c", SynthConfig(n=8, seed=3, **SMALL))


def edit_manifest(path, fn):
    doc = json.loads(path.read_text())
    fn(doc)
    path.write_text(json.dumps(doc))
    return path


def test_volume_and_expression_roundtrip(tmp_path, rng):
    v = rng.standard_normal((2, 3, 4)).astype(np.float32)
    write_volume(tmp_path / "v.raw", v)
    np.testing.assert_array_equal(read_volume(tmp_path / "v.raw"), v)
    assert json.loads((tmp_path / "v.json").read_text())["shape"] == [2, 3, 4]
    x = rng.standard_normal(7)
    write_expression(tmp_path / "x.tsv", x)
    np.testing.assert_array_equal(read_expression(tmp_path / "x.tsv"), x)
    (tmp_path / "bad.tsv").write_text("gene\tval\nA\t1\n")
    with pytest.raises(CohortError):
        read_expression(tmp_path / "bad.tsv")


def test_load_valid_cohort(cohort):
    man = load_cohort(cohort)
    assert man.n == 8 and len(set(man.ids)) == 8
    arr = man.load_arrays()
    assert arr.ct.shape == (8, 4, 8, 8) and arr.rna.shape == (8, 20)
    assert arr.present.all()
    assert man.latent_risk().shape == (8,)


def test_duplicate_id(cohort):
    edit_manifest(cohort, lambda d: d["patients"][1].update(id=d["patients"][0]["id"]))
    with pytest.raises(CohortError, match="duplicate"):
        load_cohort(cohort)


def test_minimum_modalities(cohort):
    def drop(d):
        del d["patients"][0]["pet_path"]
        del d["patients"][0]["rna_path"]

    edit_manifest(cohort, drop)
    with pytest.raises(CohortError, match="at least two"):
        load_cohort(cohort)


def test_two_modalities_are_enough(cohort):
    edit_manifest(cohort, lambda d: d["patients"][0].pop("rna_path"))
    arr = load_cohort(cohort).load_arrays()
    assert arr.present[0].tolist() == [True, True, False]


def test_missing_file_schema_and_label_errors(cohort):
    (cohort.parent / "P0002_ct.raw").unlink()
    with pytest.raises(CohortError, match="missing file"):
        load_cohort(cohort)
    edit_manifest(cohort, lambda d: d.pop("preprocessing"))
    with pytest.raises(CohortError, match="schema"):
        load_cohort(cohort)


def test_bad_label(tmp_path):
    path = synthesize_cohort(tmp_path, SynthConfig(n=8, **SMALL))
    edit_manifest(path, lambda d: d["patients"][0].update(time_days=-1.0))
    with pytest.raises(CohortError):
        load_cohort(path)


def test_truncated_volume(cohort):
    f = cohort.parent / "P0001_pet.raw"
    f.write_bytes(f.read_bytes()[:-4])
    with pytest.raises(CohortError, match="size"):
        load_cohort(cohort)


def test_gene_count_mismatch(cohort):
    write_expression(cohort.parent / "P0003_rna.tsv", np.zeros(19))
    with pytest.raises(CohortError, match="genes"):
        load_cohort(cohort)


def test_preprocess_constant_volume():
    vol, degenerate = preprocess_volume(np.full((3, 4, 5), 7.0), (3, 4, 5))
    assert degenerate
    np.testing.assert_array_equal(vol, 0.0)


def test_resample_identity_and_ramp(rng):
    v = rng.standard_normal((4, 5, 6))
    np.testing.assert_allclose(resample_volume(v, (4, 5, 6)), v, atol=1e-12)
    ramp = np.broadcast_to(np.arange(8.0)[:, None, None], (8, 2, 2))
    out = resample_volume(ramp, (4, 2, 2))
    # pixel-centre aligned 2x downsampling samples the source at 2i + 0.5
    expected = np.interp(2 * np.arange(4) + 0.5, np.arange(8), np.arange(8.0))
    np.testing.assert_allclose(out[:, 0, 0], expected, atol=1e-12)
    np.testing.assert_allclose(out[:, 0, 0], [0.5, 2.5, 4.5, 6.5])


@given(st.integers(0, 10_000))
@settings(max_examples=25, deadline=None)
def test_zscore_moments(seed):
    rng = np.random.default_rng(seed)
    raw = rng.normal(rng.uniform(-100, 100), rng.uniform(0.1, 50), (5, 6, 7))
    vol, degenerate = preprocess_volume(raw, (4, 4, 4))
    assert not degenerate
    assert abs(vol.mean()) < 1e-6 and abs(vol.std() - 1) < 1e-6


def test_synthesis_byte_identical(tmp_path):
    cfg = SynthConfig(n=8, seed=11, **SMALL)
    a = synthesize_cohort(tmp_path / "a", cfg)
    b = synthesize_cohort(tmp_path / "b", cfg)
    names = sorted(p.name for p in a.parent.iterdir())
    assert names == sorted(p.name for p in b.parent.iterdir())
    for name in names:
        assert (a.parent / name).read_bytes() == (b.parent / name).read_bytes()


def test_synthesis_no_censoring(tmp_path):
    man = load_cohort(synthesize_cohort(tmp_path, SynthConfig(n=12, censor_rate=0.0, **SMALL)))
    assert man.events().all()


def test_synthesis_rejects_bad_config():
    with pytest.raises(ValueError):
        SynthConfig(n=7)
    with pytest.raises(ValueError):
        SynthConfig(censor_rate=1.0)


@pytest.mark.parametrize("effect,check", [
    (0.0, lambda c: abs(c - 0.5) <= 0.05),
    (2.0, lambda c: c >= 0.75),
])
def test_synthesis_oracle_c_index(tmp_path, effect, check):
    man = load_cohort(synthesize_cohort(tmp_path, SynthConfig(n=500, effect_size=effect, seed=1, **SMALL)))
    c = concordance_index(-man.latent_risk(), (man.times(), man.events()))
    assert check(c), c


def test_imputation_examples():
    e = np.array([0.6, 0.8])
    np.testing.assert_allclose(impute_missing_modality(e, e, None).r_tilde, e)
    out = impute_missing_modality([1.0, 0.0], [0.0, 1.0], None)
    np.testing.assert_allclose(out.r_tilde, [0.70710678, 0.70710678], atol=1e-8)
    z = impute_missing_modality([1.0, 0.0], None, [0.0, 1.0], strategy="zero")
    np.testing.assert_array_equal(z.p_tilde, [0.0, 0.0])
    assert z.flags["zero_imputed"]
    with pytest.raises(ValueError):
        impute_missing_modality([1.0, 0.0], None, None)
    with pytest.raises(ValueError):
        impute_missing_modality([1.0, 0.0], [0.0, 1.0], None, strategy="median")
    with pytest.raises(ValueError):
        impute_missing_modality([1.0, 0.0], [0.0, 1.0], None, strategy="predicted")


@given(st.integers(0, 10_000))
@settings(max_examples=30)
def test_average_imputation_is_unit_norm(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal((2, 5))
    a, b = a / np.linalg.norm(a), b / np.linalg.norm(b)
    out = impute_missing_modality(None, a, b)
    assert np.linalg.norm(out.t_tilde) == pytest.approx(1.0, abs=1e-9)
    assert not out.flags["zero_imputed"]


def test_predicted_imputation_learns_mapping(rng):
    t = rng.standard_normal((60, 4))
    t /= np.linalg.norm(t, axis=1, keepdims=True)
    p = t[:, ::-1].copy()
    reg = ImputationRegressor(4, seed=0).fit(np.concatenate([t, p], axis=1), t, epochs=400)
    out = impute_missing_modality(t[0], p[0], None, strategy="predicted", regressor=reg)
    assert np.linalg.norm(out.r_tilde) == pytest.approx(1.0)
    assert out.r_tilde @ t[0] > 0.9


def test_fold_sizes_and_determinism():
    assert make_folds([f"p{i}" for i in range(8)], 4).sizes == [2, 2, 2, 2]
    split = make_folds([f"p{i}" for i in range(10)], 4, seed=5)
    assert sorted(split.sizes, reverse=True) == [3, 3, 2, 2]
    again = make_folds([f"p{i}" for i in range(10)], 4, seed=5)
    np.testing.assert_array_equal(split.fold_of, again.fold_of)
    with pytest.raises(ValueError):
        make_folds(["a", "b"], 3)


@given(st.integers(1, 60), st.integers(1, 8), st.integers(0, 1000))
def test_folds_partition(n, k, seed):
    if k > n:
        return
    split = make_folds(range(n), k, seed)
    tests = [split.test_index(i) for i in range(k)]
    joined = np.sort(np.concatenate(tests))
    np.testing.assert_array_equal(joined, np.arange(n))
    assert max(split.sizes) - min(split.sizes) <= 1
    for i in range(k):
        assert np.intersect1d(split.train_index(i), split.test_index(i)).size == 0
