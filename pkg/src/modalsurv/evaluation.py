"""Cross-validated evaluation and ablation tables on frozen embeddings."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .checkpoint import Checkpoint
from .data import CohortArrays, FoldSplit, ImputationRegressor, impute_missing_modality
from .encoders import EncoderConfig
from .metrics import NoComparablePairsError, aggregate_folds, concordance_index
from .pretrain import embed_partial
from .survival import SurvivalConfig, fuse_embeddings, predict_risk, train_cox_head

log = logging.getLogger(__name__)

MODALITY_SUBSETS = {
    "ct+pet": (0, 1),
    "ct+rna": (0, 2),
    "pet+rna": (1, 2),
    "ct+pet+rna": (0, 1, 2),
}


def checkpoint_embeddings(ckpt: Checkpoint, arrays: CohortArrays):
    """Projected (t, p, r) for every patient; NaN rows where a modality is absent."""
    enc_cfg = EncoderConfig(**ckpt.config["encoder"])
    return embed_partial(ckpt.params, enc_cfg, arrays)


def fill_missing(t, p, r, strategy: str = "average", regressor=None):
    """Impute NaN rows of any single modality per patient."""
    t, p, r = (np.array(x, dtype=np.float64, copy=True) for x in (t, p, r))
    for i in range(t.shape[0]):
        rows = [t[i], p[i], r[i]]
        miss = [np.isnan(x).any() for x in rows]
        if not any(miss):
            continue
        filled = impute_missing_modality(*(None if m else x for x, m in zip(rows, miss)), strategy=strategy, regressor=regressor)
        t[i], p[i], r[i] = filled.as_tuple()
    return t, p, r


@dataclass
class CVResult:
    folds: list[dict]
    mean: float
    std: float
    risk: np.ndarray = field(repr=False)

    @property
    def valid_scores(self) -> list[float]:
        return [f["c_index"] for f in self.folds if f["valid"]]


def cross_validate(features, time, event, folds: FoldSplit, cfg: SurvivalConfig | None = None, tie_credit: float = 0.0, scores=None) -> CVResult:
    """Train a Cox head on each training split and score the held-out fold.

    The held-out C-index is computed on ``-eta`` so that larger scores mean
    longer predicted survival. ``scores`` bypasses training and evaluates
    the given survival-oriented scores per fold instead.
    """
    cfg = cfg or SurvivalConfig()
    time = np.asarray(time, dtype=np.float64)
    event = np.asarray(event, dtype=np.int64)
    risk = np.full(time.size, np.nan)
    rows = []
    for k in range(folds.fold_count):
        train, test = folds.train_index(k), folds.test_index(k)
        if scores is None:
            head = train_cox_head(features[train], (time[train], event[train]), cfg).head
            eta = np.atleast_1d(predict_risk(features[test], head))
            risk[test] = eta
            fold_scores = -eta
        else:
            fold_scores = np.asarray(scores, dtype=np.float64)[test]
            risk[test] = -fold_scores
        try:
            c = concordance_index(fold_scores, (time[test], event[test]), tie_credit)
            rows.append({"fold": k, "c_index": c, "valid": True, "n_test": int(test.size)})
        except NoComparablePairsError:
            log.warning("fold %d has no comparable pairs; excluded from the mean", k)
            rows.append({"fold": k, "c_index": float("nan"), "valid": False, "n_test": int(test.size)})
    valid = [r["c_index"] for r in rows if r["valid"]]
    if not valid:
        raise NoComparablePairsError("no fold has comparable pairs")
    mean, std = aggregate_folds(valid)
    return CVResult(rows, mean, std, risk)


def modality_ablation(t, p, r, time, event, folds, cfg=None, tie_credit=0.0) -> list[dict]:
    """One row per modality subset; omitted modalities are dropped from fusion."""
    parts = (t, p, r)
    out = []
    for name, keep in MODALITY_SUBSETS.items():
        features = np.concatenate([parts[j] for j in keep], axis=1)
        res = cross_validate(features, time, event, folds, cfg, tie_credit)
        out.append({"modalities": name, "mean": res.mean, "std": res.std, "folds": res.valid_scores})
    return out


def replacement_order(n: int, seed: int) -> np.ndarray:
    return np.random.default_rng([seed, 53]).permutation(n)


def replaced_count(n: int, percent: float) -> int:
    """Whole patients replaced for a percentage (floor rule)."""
    return int(np.floor(n * percent / 100.0 + 1e-9))


def missing_rna_ablation(t, p, r, time, event, folds, percentages, strategy="average", seed=0, cfg=None, tie_credit=0.0) -> list[dict]:
    """Replace RNA embeddings of a growing patient subset by imputation.

    Patients are taken from one seeded permutation, so each level's
    replaced set contains the previous level's.
    """
    n = t.shape[0]
    order = replacement_order(n, seed)
    out = []
    for pct in percentages:
        if not 0 <= pct <= 100:
            raise ValueError(f"percentage {pct} outside [0, 100]")
        chosen = order[: replaced_count(n, pct)]
        r_mod = np.array(r, dtype=np.float64, copy=True)
        r_mod[chosen] = np.nan
        regressor = None
        if strategy == "predicted" and chosen.size:
            keep = np.setdiff1d(np.arange(n), chosen)
            regressor = ImputationRegressor(t.shape[1], seed=seed).fit(np.concatenate([t[keep], p[keep]], axis=1), r[keep])
        tt, pp, rr = fill_missing(t, p, r_mod, strategy, regressor)
        res = cross_validate(fuse_embeddings(tt, pp, rr), time, event, folds, cfg, tie_credit)
        out.append({"percent": pct, "replaced": int(chosen.size), "strategy": strategy, "mean": res.mean, "std": res.std, "folds": res.valid_scores})
    return out
