"""Cross-patient prototype alignment.

Projected embeddings of every modality are scored against a bank of
trainable unit-norm prototypes. Targets come from spherical K-means run
over the pooled embeddings of all three modalities; each modality is then
trained to predict the cluster of another modality of the same patient.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .core import DimensionMismatchError, GradientRecord, ZeroNormError, record_from_tensors
from .tensor import Tensor, l2_normalize_rows

log = logging.getLogger(__name__)

LOG_FLOOR = 1e-12

# (embedding modality, target modality): t vs PET's cluster, p vs RNA's, r vs CT's
CYCLIC_TARGETS = (("t", "p"), ("p", "r"), ("r", "t"))


def _unit_rows(x):
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise ZeroNormError("zero-norm embedding")
    return x / norms


@dataclass
class PrototypeBank:
    prototypes: np.ndarray
    tau2: float = 0.2

    def __post_init__(self):
        self.prototypes = _unit_rows(self.prototypes)
        if not self.tau2 > 0:
            raise ValueError("tau2 must be positive")

    @classmethod
    def random(cls, k: int, dim: int, seed: int = 0, tau2: float = 0.2, dtype=np.float64):
        if k < 1:
            raise ValueError("need at least one prototype")
        rng = np.random.default_rng([seed, 17])
        bank = cls(rng.standard_normal((k, dim)), tau2)
        bank.prototypes = bank.prototypes.astype(dtype)
        return bank

    @property
    def k(self) -> int:
        return self.prototypes.shape[0]

    @property
    def dim(self) -> int:
        return self.prototypes.shape[1]


@dataclass
class ClusterAssignments:
    """Cluster index per patient for each modality (one-hot available on demand)."""

    z_t: np.ndarray
    z_p: np.ndarray
    z_r: np.ndarray
    k: int

    def __post_init__(self):
        self.z_t, self.z_p, self.z_r = (np.asarray(z, dtype=np.int64) for z in (self.z_t, self.z_p, self.z_r))
        if not (self.z_t.shape == self.z_p.shape == self.z_r.shape):
            raise ValueError("assignment arrays differ in length")
        for z in (self.z_t, self.z_p, self.z_r):
            if z.size and (z.min() < 0 or z.max() >= self.k):
                raise ValueError("assignment index out of range")

    def __len__(self):
        return self.z_t.size

    def index(self, modality: str) -> np.ndarray:
        return getattr(self, f"z_{modality}")

    def one_hot(self, modality: str) -> np.ndarray:
        z = self.index(modality)
        out = np.zeros((z.size, self.k))
        out[np.arange(z.size), z] = 1.0
        return out

    def subset(self, rows) -> "ClusterAssignments":
        return ClusterAssignments(self.z_t[rows], self.z_p[rows], self.z_r[rows], self.k)


def prototype_logits(e: Tensor, prototypes: Tensor, tau2: float) -> Tensor:
    return (l2_normalize_rows(e) @ l2_normalize_rows(prototypes).T) * (1.0 / tau2)


def prototype_probabilities(e, bank: PrototypeBank) -> np.ndarray:
    """Softmax over tempered cosine similarities to every prototype.

    ``e`` may be one embedding ``(dim,)`` or a batch ``(B, dim)``.
    """
    arr = np.asarray(e, dtype=np.float64)
    single = arr.ndim == 1
    if arr.shape[-1] != bank.dim:
        raise DimensionMismatchError(f"embedding dim {arr.shape[-1]} != prototype dim {bank.dim}")
    probs = prototype_logits(Tensor(np.atleast_2d(arr)), Tensor(bank.prototypes), bank.tau2).softmax(axis=1).data
    return probs[0] if single else probs


def alignment_loss(p, z) -> GradientRecord:
    """Cross-entropy ``-sum_k z_k log p_k`` for a one-hot target ``z``.

    A zero probability at the hot index is clamped to ``LOG_FLOOR`` and
    reported via ``flags["clamped"]``.
    """
    p = np.asarray(p, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    if p.shape != z.shape or p.ndim != 1:
        raise DimensionMismatchError("p and z must be equal-length vectors")
    if np.count_nonzero(z) != 1 or z.sum() != 1.0:
        raise ValueError("z must be one-hot")
    hot = int(np.argmax(z))
    clamped = p[hot] < LOG_FLOOR
    grad = np.zeros_like(p)
    if clamped:
        log.warning("probability at target index %d below log floor; clamped", hot)
        value = -np.log(LOG_FLOOR)
    else:
        value = -np.log(p[hot])
        grad[hot] = -1.0 / p[hot]
    return GradientRecord(value, {"p": grad}, {"clamped": bool(clamped)})


def cpm_objective(t: Tensor, p: Tensor, r: Tensor, prototypes: Tensor, tau2: float, assigns: ClusterAssignments) -> Tensor:
    mods = {"t": t, "p": p, "r": r}
    n = t.shape[0]
    if len(assigns) != n:
        raise ValueError(f"{len(assigns)} assignment rows for a batch of {n}")
    rows = np.arange(n)
    total = None
    for emb, target in CYCLIC_TARGETS:
        logits = prototype_logits(mods[emb], prototypes, tau2)
        ce = (logits.logsumexp(axis=1) - logits[rows, assigns.index(target)]).sum()
        total = ce if total is None else total + ce
    return total * (1.0 / (3 * n))


def cpm_loss(batch, bank: PrototypeBank, assigns: ClusterAssignments) -> GradientRecord:
    """Mean over patients of the three cyclic prototype alignment terms.

    Differentiable w.r.t. the embeddings and the prototypes; assignments are
    held constant.
    """
    leaves = {k: Tensor(getattr(batch, k), requires_grad=True) for k in "tpr"}
    protos = Tensor(bank.prototypes.astype(np.float64), requires_grad=True)
    loss = cpm_objective(leaves["t"], leaves["p"], leaves["r"], protos, bank.tau2, assigns)
    return record_from_tensors(loss, {**leaves, "prototypes": protos})


# K-means ----------------------------------------------------------------------


@dataclass
class KMeansResult:
    centroids: np.ndarray
    assignments: np.ndarray
    inertia: float
    history: list[float] = field(default_factory=list)
    iterations: int = 0
    converged: bool = False


def _assign(x, centroids):
    dist = 1.0 - x @ centroids.T
    labels = np.argmin(dist, axis=1)
    return labels, dist[np.arange(x.shape[0]), labels]


def _update(x, labels, dist, centroids):
    k = centroids.shape[0]
    sums = np.zeros_like(centroids)
    np.add.at(sums, labels, x)
    counts = np.bincount(labels, minlength=k)
    new = centroids.copy()
    norms = np.linalg.norm(sums, axis=1)
    ok = (counts > 0) & (norms > 0)
    new[ok] = sums[ok] / norms[ok, None]
    empty = np.flatnonzero(counts == 0)
    if empty.size:
        # farthest points first; ties broken by lower index
        order = np.lexsort((np.arange(dist.size), -dist))
        for cluster, point in zip(empty, order):
            if dist[point] <= 0:
                break
            new[cluster] = x[point]
    return new


def kmeans_cluster(embeddings, k: int, init=None, max_iters: int = 100, tol: float = 1e-8, seed: int = 0) -> KMeansResult:
    """Spherical K-means with cosine distance.

    Without ``init`` the starting centroids are ``k`` distinct points drawn
    with a seeded generator. Empty clusters are re-seeded with the points
    farthest from their current centroid. Stops after ``max_iters`` updates
    or once no centroid moves by more than ``tol``.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError("kmeans needs a nonempty (n, dim) array")
    if k < 1:
        raise ValueError("k must be at least 1")
    x = _unit_rows(x)
    if init is None:
        if k > x.shape[0]:
            raise ValueError(f"cannot draw {k} initial centroids from {x.shape[0]} points")
        rng = np.random.default_rng(seed)
        centroids = x[rng.choice(x.shape[0], size=k, replace=False)].copy()
    else:
        centroids = _unit_rows(init).copy()
        if centroids.shape != (k, x.shape[1]):
            raise DimensionMismatchError(f"init shape {centroids.shape} != ({k}, {x.shape[1]})")

    history = []
    converged = False
    it = 0
    labels, dist = _assign(x, centroids)
    history.append(float(dist.sum()))
    while it < max_iters:
        new = _update(x, labels, dist, centroids)
        shift = float(np.max(np.linalg.norm(new - centroids, axis=1)))
        centroids = new
        it += 1
        labels, dist = _assign(x, centroids)
        history.append(float(dist.sum()))
        if shift <= tol:
            converged = True
            break
    return KMeansResult(centroids, labels, history[-1], history, it, converged)


def refresh_assignments(t, p, r, bank: PrototypeBank, max_iters: int = 50, tol: float = 1e-6) -> tuple[ClusterAssignments, KMeansResult]:
    """Pooled K-means over all modalities, started from the current prototypes."""
    t, p, r = (np.asarray(a, dtype=np.float64) for a in (t, p, r))
    n = t.shape[0]
    result = kmeans_cluster(np.concatenate([t, p, r]), bank.k, init=bank.prototypes, max_iters=max_iters, tol=tol)
    lab = result.assignments
    return ClusterAssignments(lab[:n], lab[n : 2 * n], lab[2 * n :], bank.k), result

