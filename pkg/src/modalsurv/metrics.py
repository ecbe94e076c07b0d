"""Survival evaluation metrics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import chi2

from .survival import label_arrays


class NoComparablePairsError(ValueError):
    pass


def concordance_index(scores, labels, tie_credit: float = 0.0) -> float:
    """Concordance over pairs with ``T_i < T_j`` and ``delta_i = 1``.

    A comparable pair is concordant when the shorter-lived subject has the
    strictly *lower* score, so scores must be oriented "larger = longer
    predicted survival" (pass ``-eta`` for Cox risks). Score ties earn
    ``tie_credit`` (0 by default, 0.5 for the common convention). Pairs with
    equal times are never comparable.

    Runs in O(N log N): subjects are swept from the longest time down while a
    Fenwick tree over score ranks counts the scores already seen.
    """
    time, event = label_arrays(labels)
    s = np.asarray(scores, dtype=np.float64)
    if not (s.size == time.size == event.size):
        raise ValueError("scores and labels are not aligned")
    if not np.all(np.isfinite(s)):
        raise ValueError("scores must be finite")
    uniq, ranks = np.unique(s, return_inverse=True)
    m = uniq.size
    tree = np.zeros(m + 1, dtype=np.int64)

    def add(i):
        i += 1
        while i <= m:
            tree[i] += 1
            i += i & -i

    def prefix(i):  # count of inserted ranks < i
        total = 0
        while i > 0:
            total += tree[i]
            i -= i & -i
        return total

    order = np.argsort(-time, kind="stable")
    inserted = 0
    concordant = ties = comparable = 0
    pos = 0
    n = time.size
    while pos < n:
        end = pos
        while end < n and time[order[end]] == time[order[pos]]:
            end += 1
        group = order[pos:end]
        for i in group:
            if event[i]:
                r = ranks[i]
                below_or_eq = prefix(r + 1)
                below = prefix(r)
                comparable += inserted
                concordant += inserted - below_or_eq
                ties += below_or_eq - below
        for i in group:
            add(ranks[i])
        inserted += group.size
        pos = end
    if comparable == 0:
        raise NoComparablePairsError("no comparable pairs")
    return (concordant + tie_credit * ties) / comparable


def concordance_index_bruteforce(scores, labels, tie_credit: float = 0.0) -> float:
    """Direct O(N^2) enumeration of every ordered pair."""
    time, event = label_arrays(labels)
    s = np.asarray(scores, dtype=np.float64)
    num = 0.0
    den = 0
    for i in range(time.size):
        if not event[i]:
            continue
        for j in range(time.size):
            if time[i] < time[j]:
                den += 1
                if s[i] < s[j]:
                    num += 1
                elif s[i] == s[j]:
                    num += tie_credit
    if den == 0:
        raise NoComparablePairsError("no comparable pairs")
    return num / den


@dataclass
class KmCurve:
    times: np.ndarray
    survival: np.ndarray
    at_risk: np.ndarray
    events: np.ndarray

    def at(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=np.float64)
        if self.times.size == 0:
            return np.ones_like(t)
        idx = np.searchsorted(self.times, t, side="right") - 1
        return np.where(idx >= 0, self.survival[np.maximum(idx, 0)], 1.0)


def kaplan_meier(labels) -> KmCurve:
    """Product-limit estimate at each distinct event time.

    With no events the curve has no steps and :meth:`KmCurve.at` is 1
    everywhere.
    """
    time, event = label_arrays(labels)
    if time.size == 0:
        raise ValueError("empty cohort")
    times = np.unique(time[event == 1])
    at_risk = np.array([(time >= t).sum() for t in times], dtype=np.int64)
    events = np.array([((time == t) & (event == 1)).sum() for t in times], dtype=np.int64)
    # (n - d) / n rather than 1 - d / n keeps simple fractions exact
    survival = np.cumprod((at_risk - events) / at_risk) if times.size else np.array([])
    return KmCurve(times, survival, at_risk, events)


@dataclass
class RiskGroups:
    low: np.ndarray
    high: np.ndarray
    threshold: float
    degenerate: bool


def stratify_risk(scores) -> RiskGroups:
    """Median split of risk scores (larger = riskier); median ties go low."""
    s = np.asarray(scores, dtype=np.float64)
    if s.size < 2:
        raise ValueError("need at least two subjects to stratify")
    med = float(np.median(s))
    low = np.flatnonzero(s <= med)
    high = np.flatnonzero(s > med)
    return RiskGroups(low, high, med, degenerate=high.size == 0)


@dataclass
class LogRankResult:
    chi_square: float
    p_value: float
    observed_a: float
    expected_a: float


def logrank_test(labels_a, labels_b) -> LogRankResult:
    ta, ea = label_arrays(labels_a)
    tb, eb = label_arrays(labels_b)
    if ta.size == 0 or tb.size == 0:
        raise ValueError("both groups must be nonempty")
    time = np.concatenate([ta, tb])
    event = np.concatenate([ea, eb])
    in_a = np.r_[np.ones(ta.size, bool), np.zeros(tb.size, bool)]
    if not event.any():
        raise ValueError("log-rank test needs at least one event")
    obs = exp = var = 0.0
    for t in np.unique(time[event == 1]):
        at_risk = time >= t
        n = at_risk.sum()
        n_a = (at_risk & in_a).sum()
        dead = (time == t) & (event == 1)
        d = dead.sum()
        obs += (dead & in_a).sum()
        exp += d * n_a / n
        if n > 1:
            var += d * (n_a / n) * (1 - n_a / n) * (n - d) / (n - 1)
    if var <= 0:
        return LogRankResult(0.0, 1.0, obs, exp)
    stat = (obs - exp) ** 2 / var
    return LogRankResult(float(stat), float(chi2.sf(stat, 1)), obs, exp)


def aggregate_folds(per_fold) -> tuple[float, float]:
    """Mean and sample standard deviation (0 for a single fold)."""
    x = np.asarray(per_fold, dtype=np.float64)
    if x.size == 0:
        raise ValueError("no folds to aggregate")
    std = float(np.std(x, ddof=1)) if x.size > 1 else 0.0
    return float(np.mean(x)), std
