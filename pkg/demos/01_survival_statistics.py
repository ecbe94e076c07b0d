"""
Survival statistics on a toy cohort
===================================

Kaplan-Meier curves, the log-rank test and the concordance index, on a
cohort small enough to check by hand.
"""

import numpy as np

from modalsurv.metrics import concordance_index, kaplan_meier, logrank_test, stratify_risk
from modalsurv.survival import SurvivalLabel, breslow_baseline, fit_cox, survival_function

# Six patients: survival time in days and whether death was observed.
# A censored patient (event 0) was alive at last follow-up.
labels = [SurvivalLabel(t, e) for t, e in [(5, 1), (8, 0), (12, 1), (20, 1), (21, 0), (30, 1)]]

km = kaplan_meier(labels)
print("Kaplan-Meier steps")
for t, s, n, d in zip(km.times, km.survival, km.at_risk, km.events):
    print(f"  t={t:5.1f}  at risk {n}  deaths {d}  S(t)={s:.3f}")

# The curve is a step function; between event times it stays flat
print("S(10) =", km.at(10.0))

###############################################################################
# Concordance
# -----------
# The C-index counts comparable pairs (the shorter time is an observed
# event) where the patient who died first also has the lower score. Scores
# are survival-oriented, so a risk model's eta is passed with its sign flipped.

risk = np.array([2.0, 0.4, 1.1, 0.3, -0.5, -1.0])
print("C-index of -risk:", concordance_index(-risk, labels))
print("C-index of +risk (a model ranking the wrong way):", concordance_index(risk, labels))

###############################################################################
# Risk groups and the log-rank test
# ---------------------------------
# A median split of the scores gives a low and a high risk group; ties at
# the median land in the low group.

groups = stratify_risk(risk)
time = np.array([lab.time for lab in labels])
event = np.array([lab.event for lab in labels])
res = logrank_test((time[groups.low], event[groups.low]), (time[groups.high], event[groups.high]))
print(f"low group {groups.low.tolist()}, high group {groups.high.tolist()}")
print(f"log-rank chi2 = {res.chi_square:.3f}, p = {res.p_value:.3f}")

###############################################################################
# A Cox model on simulated data
# -----------------------------
# With hazard exp(x) the fitted coefficient should sit near 1.

rng = np.random.default_rng(0)
x = rng.standard_normal(1000)
t_true = rng.exponential(1 / np.exp(x))
t_cens = rng.exponential(2.0, 1000)
obs_t, obs_e = np.minimum(t_true, t_cens), (t_true <= t_cens).astype(int)
beta = fit_cox(x[:, None], obs_t, obs_e)
print(f"fitted beta = {beta[0]:.3f} (truth 1.0), censored {1 - obs_e.mean():.0%}")

# Breslow's estimator turns the fitted linear predictor into survival curves
base = breslow_baseline(x * beta[0], (obs_t, obs_e))
grid = np.array([0.1, 0.5, 1.0, 2.0])
for xv in (-1.0, 0.0, 1.0):
    s = survival_function(base, xv * beta[0], grid)
    print(f"x={xv:+.0f}: S = " + "  ".join(f"{v:.2f}" for v in s))
