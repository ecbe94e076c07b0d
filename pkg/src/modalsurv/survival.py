"""Cox proportional-hazards head on fused multi-modal embeddings."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from .core import DimensionMismatchError, GradientRecord, record_from_tensors
from .optim import Adam
from .tensor import Tensor, as_tensor

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SurvivalLabel:
    time: float
    event: int

    def __post_init__(self):
        if not self.time > 0:
            raise ValueError(f"survival time must be positive, got {self.time}")
        if self.event not in (0, 1):
            raise ValueError(f"event indicator must be 0 or 1, got {self.event}")


def label_arrays(labels):
    """``(times, events)`` arrays from a sequence of labels or a pair of arrays."""
    if isinstance(labels, tuple) and len(labels) == 2 and not isinstance(labels[0], SurvivalLabel):
        return np.asarray(labels[0], dtype=np.float64), np.asarray(labels[1], dtype=np.int64)
    labels = list(labels)
    return (
        np.array([lab.time for lab in labels], dtype=np.float64),
        np.array([lab.event for lab in labels], dtype=np.int64),
    )


def fuse_embeddings(t_tilde, p_tilde, r_tilde) -> np.ndarray:
    """Concatenate in the fixed order CT, PET, RNA. Works row-wise on batches."""
    parts = [np.asarray(x) for x in (t_tilde, p_tilde, r_tilde)]
    if len({x.shape for x in parts}) != 1:
        raise DimensionMismatchError("all three embeddings must have the same shape")
    return np.concatenate(parts, axis=-1)


def split_fused(f) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    f = np.asarray(f)
    if f.shape[-1] % 3:
        raise DimensionMismatchError("fused width is not a multiple of 3")
    return tuple(np.split(f, 3, axis=-1))


# partial likelihood ---------------------------------------------------------


def _risk_set_lse(eta, time):
    """log sum_{j: T_j >= T_i} exp(eta_j) for every i (Breslow: ties share a set)."""
    order = np.argsort(-time, kind="stable")
    cum = np.logaddexp.accumulate(eta[order])
    t_sorted = time[order]
    # last position of each tie group in descending order
    last = np.searchsorted(-t_sorted, -t_sorted, side="right") - 1
    lse = np.empty_like(eta)
    lse[order] = cum[last]
    return lse


def cox_partial_likelihood(eta: Tensor, time, event) -> Tensor:
    """Negative Breslow partial log-likelihood summed over events."""
    eta = as_tensor(eta)
    time = np.asarray(time, dtype=np.float64)
    event = np.asarray(event, dtype=np.float64)
    e = eta.data.astype(np.float64)
    lse = _risk_set_lse(e, time)
    value = -np.sum(event * (e - lse))

    def backward(g):
        # d/d eta_k = -delta_k + sum_{i event, T_i <= T_k} exp(eta_k - lse_i)
        order = np.argsort(time, kind="stable")
        w = event[order] * np.exp(-(lse[order] - e.max()))
        cum = np.cumsum(w)
        t_sorted = time[order]
        last = np.searchsorted(t_sorted, t_sorted, side="right") - 1
        acc = np.empty_like(e)
        acc[order] = cum[last]
        grad = -event + np.exp(e - e.max()) * acc
        eta._accumulate((g * grad).astype(eta.dtype))

    return eta._child(np.asarray(value, dtype=eta.dtype), (eta,), backward)


@dataclass
class CoxHead:
    """Linear predictor ``beta . h(f)`` with an optional tanh layer ``h``."""

    beta: np.ndarray
    hidden_w: np.ndarray | None = None
    hidden_b: np.ndarray | None = None

    @classmethod
    def init(cls, in_dim: int, hidden: int | None = 64, seed: int = 0, dtype=np.float64):
        rng = np.random.default_rng([seed, 29])
        if not hidden:
            return cls(np.zeros(in_dim, dtype))
        bound = 1.0 / np.sqrt(in_dim)
        w = rng.uniform(-bound, bound, (in_dim, hidden)).astype(dtype)
        beta = rng.uniform(-1 / np.sqrt(hidden), 1 / np.sqrt(hidden), hidden).astype(dtype)
        return cls(beta, w, np.zeros(hidden, dtype))

    @property
    def in_dim(self) -> int:
        return self.beta.size if self.hidden_w is None else self.hidden_w.shape[0]

    def params(self) -> dict[str, np.ndarray]:
        out = {"head.beta": self.beta}
        if self.hidden_w is not None:
            out["head.hidden.w"] = self.hidden_w
            out["head.hidden.b"] = self.hidden_b
        return out

    @classmethod
    def from_params(cls, params):
        return cls(params["head.beta"], params.get("head.hidden.w"), params.get("head.hidden.b"))


def head_forward(fused: Tensor, params) -> Tensor:
    h = fused
    if "head.hidden.w" in params:
        h = (h @ params["head.hidden.w"] + params["head.hidden.b"]).tanh()
    return h @ params["head.beta"]


def predict_risk(fused, head: CoxHead):
    """Log relative hazard; larger means higher risk. Scalar for one subject."""
    f = np.asarray(fused, dtype=np.float64)
    if f.shape[-1] != head.in_dim:
        raise DimensionMismatchError(f"fused width {f.shape[-1]} != head input {head.in_dim}")
    eta = head_forward(Tensor(np.atleast_2d(f)), {k: Tensor(v.astype(np.float64)) for k, v in head.params().items()}).data
    return float(eta[0]) if f.ndim == 1 else eta


def cox_loss(fused, labels, head: CoxHead, wrt_fused: bool = False) -> GradientRecord:
    """Negative partial likelihood of ``head`` on fused embeddings.

    Gradients are returned for every head parameter, and for the fused
    embeddings when ``wrt_fused`` is set. A batch without events has loss 0
    and sets ``flags["all_censored"]``.
    """
    time, event = label_arrays(labels)
    f = np.atleast_2d(np.asarray(fused, dtype=np.float64))
    if f.shape[0] == 0:
        raise ValueError("empty batch")
    if f.shape[0] != time.size:
        raise DimensionMismatchError("fused embeddings and labels are not aligned")
    flags = {"all_censored": not event.any()}
    if flags["all_censored"]:
        log.warning("all subjects censored; Cox loss is 0")
    leaves = {k: Tensor(v.astype(np.float64), requires_grad=True) for k, v in head.params().items()}
    f_t = Tensor(f, requires_grad=wrt_fused)
    loss = cox_partial_likelihood(head_forward(f_t, leaves), time, event)
    names = dict(leaves)
    if wrt_fused:
        names["fused"] = f_t
    return record_from_tensors(loss, names, flags)


def fit_cox(x, time, event, l2: float = 0.0) -> np.ndarray:
    """Maximum partial-likelihood coefficients for a linear Cox model (L-BFGS)."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[0] == 1 and np.asarray(time).size > 1:
        x = x.T
    time = np.asarray(time, dtype=np.float64)
    event = np.asarray(event, dtype=np.float64)

    def objective(beta):
        b = Tensor(beta, requires_grad=True)
        loss = cox_partial_likelihood(Tensor(x) @ b, time, event) + (b * b).sum() * (0.5 * l2)
        loss.backward()
        return float(loss.data), b.grad

    res = minimize(objective, np.zeros(x.shape[1]), jac=True, method="L-BFGS-B")
    return res.x


# baseline hazard and survival curves ----------------------------------------


@dataclass
class BaselineHazard:
    event_times: np.ndarray
    cumulative_hazard: np.ndarray

    def at(self, t) -> np.ndarray:
        """Right-continuous step evaluation of H0; zero before the first event."""
        idx = np.searchsorted(self.event_times, np.asarray(t, dtype=np.float64), side="right") - 1
        return np.where(idx >= 0, self.cumulative_hazard[np.maximum(idx, 0)], 0.0)


def breslow_baseline(eta, labels) -> BaselineHazard:
    """Breslow estimator from linear predictors ``eta`` and labels."""
    time, event = label_arrays(labels)
    eta = np.asarray(eta, dtype=np.float64)
    if not event.any():
        raise ValueError("Breslow baseline needs at least one event")
    times = np.unique(time[event == 1])
    risk = np.exp(eta)
    inc = np.array([event[time == t].sum() / risk[time >= t].sum() for t in times])
    return BaselineHazard(times, np.cumsum(inc))


def survival_function(h: BaselineHazard, eta: float, time_grid) -> np.ndarray:
    grid = np.asarray(time_grid, dtype=np.float64)
    if np.any(np.diff(grid) < 0):
        raise ValueError("time grid must be nondecreasing")
    return np.exp(-h.at(grid) * np.exp(eta))


# stage-2 training ------------------------------------------------------------


@dataclass
class SurvivalConfig:
    learning_rate: float = 5e-5
    epochs: int = 100
    batch_size: int = 0  # 0 = full batch
    hidden: int = 64
    weight_decay: float = 0.0
    fine_tune: bool = False  # also update encoders and projections
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0 or self.epochs < 1 or self.batch_size < 0:
            raise ValueError("invalid survival training settings")


@dataclass
class HeadTrainingResult:
    head: CoxHead
    losses: list[float] = field(default_factory=list)


def train_cox_head(fused, labels, cfg: SurvivalConfig | None = None) -> HeadTrainingResult:
    """Adam on the negative partial likelihood with frozen inputs."""
    cfg = cfg or SurvivalConfig()
    time, event = label_arrays(labels)
    f = np.asarray(fused, dtype=np.float64)
    head = CoxHead.init(f.shape[1], cfg.hidden or None, cfg.seed)
    params = {k: Tensor(v, requires_grad=True) for k, v in head.params().items()}
    opt = Adam(params, lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    n = f.shape[0]
    bs = cfg.batch_size or n
    losses = []
    for epoch in range(cfg.epochs):
        order = np.random.default_rng([cfg.seed, epoch]).permutation(n) if bs < n else np.arange(n)
        total = 0.0
        for start in range(0, n, bs):
            idx = order[start : start + bs]
            if not event[idx].any():
                continue
            opt.zero_grad()
            loss = cox_partial_likelihood(head_forward(Tensor(f[idx]), params), time[idx], event[idx])
            loss.backward()
            opt.step()
            total += float(loss.data)
        losses.append(total)
    head = CoxHead.from_params({k: v.data for k, v in params.items()})
    return HeadTrainingResult(head, losses)
