import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from modalsurv.metrics import (
    NoComparablePairsError,
    aggregate_folds,
    concordance_index,
    concordance_index_bruteforce,
    kaplan_meier,
    logrank_test,
    stratify_risk,
)
from modalsurv.survival import SurvivalLabel


def labels(times, events):
    return [SurvivalLabel(t, e) for t, e in zip(times, events)]


def random_cohort(rng, n=30, censor=0.3, ties=False):
    time = rng.integers(1, 10, n).astype(float) if ties else rng.exponential(size=n) + 0.01
    event = (rng.random(n) >= censor).astype(int)
    scores = rng.integers(0, 5, n).astype(float) if ties else rng.standard_normal(n)
    return scores, time, event


def test_c_index_examples():
    t = [1.0, 2.0, 3.0, 4.0]
    assert concordance_index([1, 2, 3, 4], labels(t, [1] * 4)) == 1.0
    assert concordance_index([4, 3, 2, 1], labels(t, [1] * 4)) == 0.0
    assert concordance_index([2, 3, 1], labels([1, 2, 3], [1, 0, 1])) == 0.5


def test_c_index_ties_and_equal_times():
    lab = labels([1, 2, 2, 3], [1, 1, 1, 0])
    # comparable: (0,1) (0,2) (0,3) (1,3) (2,3); equal times never comparable
    # concordant (lower score, shorter time): (0,2) (0,3) (1,3); tied: (0,1) (2,3)
    scores = [1.0, 1.0, 2.0, 2.0]
    assert concordance_index(scores, lab) == pytest.approx(3 / 5)
    assert concordance_index(scores, lab, tie_credit=0.5) == pytest.approx(4 / 5)


def test_c_index_no_comparable_pairs():
    with pytest.raises(NoComparablePairsError):
        concordance_index([1, 2], labels([1, 2], [0, 0]))
    with pytest.raises(NoComparablePairsError):
        concordance_index([1, 2], labels([3, 3], [1, 1]))


@pytest.mark.parametrize("ties", [False, True])
def test_c_index_equals_bruteforce(ties):
    rng = np.random.default_rng(7)
    for _ in range(100):
        s, t, e = random_cohort(rng, ties=ties)
        if not e.any():
            continue
        for credit in (0.0, 0.5):
            assert concordance_index(s, (t, e), credit) == concordance_index_bruteforce(s, (t, e), credit)


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=40)
def test_c_index_transform_invariance_and_complement(seed):
    rng = np.random.default_rng(seed)
    s, t, e = random_cohort(rng)
    e[0] = 1
    t[0] = t.min() / 2
    c = concordance_index(s, (t, e))
    assert concordance_index(np.exp(3 * s) + 1, (t, e)) == c
    assert c + concordance_index(-s, (t, e)) == pytest.approx(1.0, abs=1e-12)
    assert 0.0 <= c <= 1.0


def test_kaplan_meier_examples():
    km = kaplan_meier(labels([1, 2, 3], [1, 1, 1]))
    np.testing.assert_allclose(km.survival, [2 / 3, 1 / 3, 0.0])
    km = kaplan_meier(labels([1, 2, 3], [1, 0, 1]))
    np.testing.assert_array_equal(km.times, [1, 3])
    np.testing.assert_allclose(km.survival, [2 / 3, 0.0])
    np.testing.assert_array_equal(km.at_risk, [3, 1])
    assert km.at(2.5) == pytest.approx(2 / 3)
    km = kaplan_meier(labels([1, 2, 3], [0, 0, 0]))
    assert km.survival.size == 0
    np.testing.assert_allclose(km.at([0.5, 2, 10]), 1.0)


def test_kaplan_meier_properties(rng):
    for _ in range(20):
        _, t, e = random_cohort(rng, n=25, ties=True)
        km = kaplan_meier((t, e))
        assert np.all((km.survival >= 0) & (km.survival <= 1))
        assert np.all(np.diff(km.survival) <= 0)
    _, t, _ = random_cohort(rng, n=15)
    assert kaplan_meier((t, np.ones(15, int))).survival[-1] == 0.0


def test_stratify_examples():
    g = stratify_risk([1, 2, 3, 4])
    np.testing.assert_array_equal(g.low, [0, 1])
    np.testing.assert_array_equal(g.high, [2, 3])
    g = stratify_risk([5, 5, 5])
    assert g.degenerate and g.high.size == 0 and g.low.size == 3
    g = stratify_risk([1, 2, 2, 3])
    np.testing.assert_array_equal(g.low, [0, 1, 2])
    np.testing.assert_array_equal(g.high, [3])
    with pytest.raises(ValueError):
        stratify_risk([1.0])


def test_logrank_identical_groups():
    a = labels([1, 3, 4, 6], [1, 0, 1, 1])
    res = logrank_test(a, a)
    assert res.chi_square == pytest.approx(0.0, abs=1e-12)
    assert res.p_value == pytest.approx(1.0)


def test_logrank_hand_tabulation():
    # A: 6, 7+, 10, 15, 19+, 25    B: 1, 3, 4, 8+, 9, 12
    a = labels([6, 7, 10, 15, 19, 25], [1, 0, 1, 1, 0, 1])
    b = labels([1, 3, 4, 8, 9, 12], [1, 1, 1, 0, 1, 1])
    # distinct event times with (n_A, n_B, d_A, d_B), tabulated by hand
    table = [
        (1, 6, 6, 0, 1), (3, 6, 5, 0, 1), (4, 6, 4, 0, 1), (6, 6, 3, 1, 0),
        (9, 4, 2, 0, 1), (10, 4, 1, 1, 0), (12, 3, 1, 0, 1), (15, 3, 0, 1, 0), (25, 1, 0, 1, 0),
    ]
    o = e = v = 0.0
    for _, na, nb, da, db in table:
        n, d = na + nb, da + db
        o += da
        e += d * na / n
        if n > 1:
            v += d * (na / n) * (nb / n) * (n - d) / (n - 1)
    res = logrank_test(a, b)
    assert res.observed_a == o
    assert res.expected_a == pytest.approx(e, abs=1e-12)
    assert res.chi_square == pytest.approx((o - e) ** 2 / v, abs=1e-6)


def test_logrank_matches_statsmodels(rng):
    from statsmodels.duration.survfunc import survdiff

    for _ in range(5):
        t = rng.exponential(size=40)
        e = (rng.random(40) > 0.3).astype(int)
        g = rng.integers(0, 2, 40)
        ours = logrank_test((t[g == 0], e[g == 0]), (t[g == 1], e[g == 1]))
        stat, p = survdiff(t, e, g)
        assert ours.chi_square == pytest.approx(stat, rel=1e-8)
        assert ours.p_value == pytest.approx(p, rel=1e-6)


def test_logrank_errors():
    with pytest.raises(ValueError):
        logrank_test(labels([1, 2], [0, 0]), labels([3], [0]))
    with pytest.raises(ValueError):
        logrank_test([], labels([3], [1]))


def test_aggregate_examples():
    assert aggregate_folds([0.7] * 4) == (pytest.approx(0.7), 0.0)
    assert aggregate_folds([0.5]) == (0.5, 0.0)
    mean, std = aggregate_folds([0.70, 0.72, 0.74, 0.76])
    assert mean == pytest.approx(0.73)
    assert std == pytest.approx(0.02582, abs=1e-5)
    with pytest.raises(ValueError):
        aggregate_folds([])
