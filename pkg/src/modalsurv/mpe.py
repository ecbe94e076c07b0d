"""Within-patient cross-modality contrastive loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import DimensionMismatchError, GradientRecord, record_from_tensors
from .tensor import Tensor, l2_normalize_rows

# (anchor, positive) directions in the order t->p, p->r, r->t
DIRECTIONS = (("t", "p"), ("p", "r"), ("r", "t"))


@dataclass
class MpeConfig:
    tau1: float = 0.1
    symmetric: bool = False

    def __post_init__(self):
        if not self.tau1 > 0:
            raise ValueError(f"tau1 must be positive, got {self.tau1}")


@dataclass
class ModalityBatch:
    """Projected embeddings for ``B`` patients, one ``(B, dim)`` array per modality."""

    t: np.ndarray
    p: np.ndarray
    r: np.ndarray

    def __post_init__(self):
        self.t, self.p, self.r = (np.atleast_2d(np.asarray(x, dtype=np.float64)) for x in (self.t, self.p, self.r))
        if not (self.t.shape == self.p.shape == self.r.shape):
            raise DimensionMismatchError("all modalities need the same (B, dim) shape")
        if self.t.shape[0] < 1:
            raise ValueError("empty batch")

    @classmethod
    def from_triplets(cls, rows):
        rows = list(rows)
        if not rows:
            raise ValueError("empty batch")
        return cls(*(np.stack(col) for col in zip(*(r.as_tuple() for r in rows))))

    @property
    def batch_size(self) -> int:
        return self.t.shape[0]


def contrastive_loss(anchor: Tensor, positive: Tensor, tau: float) -> Tensor:
    """Mean over rows of ``-log softmax_j(sim(a_i, b_j)/tau)[i]``."""
    a = l2_normalize_rows(anchor)
    b = l2_normalize_rows(positive)
    logits = (a @ b.T) * (1.0 / tau)
    n = logits.shape[0]
    diag = logits[np.arange(n), np.arange(n)]
    return (logits.logsumexp(axis=1) - diag).mean()


def mpe_objective(t: Tensor, p: Tensor, r: Tensor, cfg: MpeConfig) -> Tensor:
    mods = {"t": t, "p": p, "r": r}
    terms = [contrastive_loss(mods[a], mods[b], cfg.tau1) for a, b in DIRECTIONS]
    if cfg.symmetric:
        terms += [contrastive_loss(mods[b], mods[a], cfg.tau1) for a, b in DIRECTIONS]
    total = terms[0]
    for term in terms[1:]:
        total = total + term
    return total * (1.0 / len(terms))


def pairwise_contrastive_loss(anchor, positive, cfg: MpeConfig | None = None) -> GradientRecord:
    cfg = cfg or MpeConfig()
    a = np.atleast_2d(np.asarray(anchor, dtype=np.float64))
    b = np.atleast_2d(np.asarray(positive, dtype=np.float64))
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise ValueError("empty batch")
    if a.shape != b.shape:
        raise DimensionMismatchError(f"anchor {a.shape} and positive {b.shape} differ")
    ta, tb = Tensor(a, requires_grad=True), Tensor(b, requires_grad=True)
    return record_from_tensors(contrastive_loss(ta, tb, cfg.tau1), {"anchor": ta, "positive": tb})


def mpe_loss(batch: ModalityBatch, cfg: MpeConfig | None = None) -> GradientRecord:
    cfg = cfg or MpeConfig()
    leaves = {k: Tensor(getattr(batch, k), requires_grad=True) for k in "tpr"}
    return record_from_tensors(mpe_objective(leaves["t"], leaves["p"], leaves["r"], cfg), leaves)

