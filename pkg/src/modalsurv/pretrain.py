"""Stage-1 self-supervised pretraining: weighted MPE + CPM objective."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np

from .checkpoint import Checkpoint
from .core import GradientRecord
from .cpm import ClusterAssignments, PrototypeBank, cpm_objective, refresh_assignments
from .encoders import EncoderConfig, encode_expression, encode_modalities, encode_volume, init_encoder_params, project
from .mpe import MpeConfig, mpe_objective
from .optim import Adam
from .tensor import Tensor, concat, l2_normalize_rows

log = logging.getLogger(__name__)


class NonFiniteLossError(ArithmeticError):
    def __init__(self, term: str, epoch: int, value: float):
        super().__init__(f"non-finite {term} ({value}) at epoch {epoch}")
        self.term = term


@dataclass
class PretrainConfig:
    alpha1: float = 1.0
    alpha2: float = 1.0
    epochs: int = 100
    batch_size: int = 4
    learning_rate: float = 1e-4
    kmeans_refresh_every: int = 1
    kmeans_iters: int = 50
    num_prototypes: int = 16
    tau1: float = 0.1
    tau2: float = 0.2
    symmetric_mpe: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.alpha1 < 0 or self.alpha2 < 0 or (self.alpha1 == 0 and self.alpha2 == 0):
            raise ValueError("alpha1 and alpha2 must be nonnegative and not both zero")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 1 or self.batch_size < 1 or self.kmeans_refresh_every < 1:
            raise ValueError("epochs, batch_size and kmeans_refresh_every must be positive")
        if self.num_prototypes < 1:
            raise ValueError("num_prototypes must be positive")


def combined_loss(l_mpe: GradientRecord, l_cpm: GradientRecord, cfg: PretrainConfig) -> GradientRecord:
    """Weighted sum of two gradient records (keys absent from one count as zero)."""
    grads = {}
    for key in l_mpe.grads.keys() | l_cpm.grads.keys():
        a = l_mpe.grads.get(key)
        b = l_cpm.grads.get(key)
        if a is None:
            grads[key] = cfg.alpha2 * b
        elif b is None:
            grads[key] = cfg.alpha1 * a
        else:
            grads[key] = cfg.alpha1 * a + cfg.alpha2 * b
    return GradientRecord(cfg.alpha1 * l_mpe.value + cfg.alpha2 * l_cpm.value, grads, {**l_mpe.flags, **l_cpm.flags})


def embed_arrays(params, enc_cfg: EncoderConfig, ct, pet, rna, chunk: int = 16):
    """Projected embeddings for every row (no graph is recorded)."""
    plain = {k: (v.data if isinstance(v, Tensor) else v) for k, v in params.items()}
    outs = [[], [], []]
    for start in range(0, len(ct), chunk):
        sl = slice(start, start + chunk)
        for j, tensor in enumerate(encode_modalities(plain, enc_cfg, ct[sl], pet[sl], rna[sl])):
            outs[j].append(tensor.data)
    return tuple(np.concatenate(o).astype(np.float64) for o in outs)


def embed_partial(params, enc_cfg: EncoderConfig, arrays, chunk: int = 16):
    """Projected embeddings with NaN rows wherever a modality is absent."""
    plain = {k: (v.data if isinstance(v, Tensor) else v) for k, v in params.items()}
    n = len(arrays.ids)
    dim = plain["proj.ct.w"].shape[1]
    outs = [np.full((n, dim), np.nan) for _ in range(3)]
    sources = (
        (arrays.ct, lambda x: encode_volume(x, plain, enc_cfg, "ct"), "proj.ct.w"),
        (arrays.pet, lambda x: encode_volume(x, plain, enc_cfg, "pet"), "proj.pet.w"),
        (arrays.rna, lambda x: encode_expression(x, plain, enc_cfg), "proj.rna.w"),
    )
    for j, (data, enc, proj) in enumerate(sources):
        rows = np.flatnonzero(arrays.present[:, j])
        for start in range(0, rows.size, chunk):
            idx = rows[start : start + chunk]
            outs[j][idx] = project(enc(data[idx]), plain[proj]).data
    return tuple(outs)


class Pretrainer:
    """Owns all trainable state of one pretraining run."""

    def __init__(self, enc_cfg: EncoderConfig, cfg: PretrainConfig, dtype=np.float32):
        self.enc_cfg = enc_cfg
        self.cfg = cfg
        raw = init_encoder_params(enc_cfg, dtype)
        bank = PrototypeBank.random(cfg.num_prototypes, enc_cfg.projection_dim, enc_cfg.seed, cfg.tau2)
        raw["prototypes"] = bank.prototypes.astype(dtype)
        self.params = {k: Tensor(v, requires_grad=True, name=k) for k, v in raw.items()}
        self.optimizer = Adam(self.params, lr=cfg.learning_rate)
        self.assignments: ClusterAssignments | None = None
        self.epoch = 0
        self.history: list[dict] = []

    # checkpoint conversion ------------------------------------------------

    def config_snapshot(self) -> dict:
        return {"encoder": self.enc_cfg.to_dict(), "pretrain": asdict(self.cfg), "optimizer": self.optimizer.describe()}

    def to_checkpoint(self) -> Checkpoint:
        extra = {}
        if self.assignments is not None:
            for m in "tpr":
                extra[f"assign.z_{m}"] = self.assignments.index(m).astype(np.float32)
        return Checkpoint(
            params={k: v.data for k, v in self.params.items()},
            config=self.config_snapshot(),
            epoch=self.epoch,
            history=[dict(h) for h in self.history],
            optimizer=self.optimizer.state_arrays(),
            optimizer_step=self.optimizer.step_count,
            extra=extra,
        )

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint, cfg: PretrainConfig | None = None):
        enc_cfg = EncoderConfig(**ckpt.config["encoder"])
        cfg = cfg or PretrainConfig(**ckpt.config["pretrain"])
        self = cls.__new__(cls)
        self.enc_cfg = enc_cfg
        self.cfg = cfg
        self.params = {k: Tensor(np.array(v), requires_grad=True, name=k) for k, v in ckpt.params.items()}
        self.optimizer = Adam(self.params, lr=cfg.learning_rate)
        if ckpt.optimizer:
            self.optimizer.load_state_arrays(ckpt.optimizer, ckpt.optimizer_step)
        self.assignments = None
        if "assign.z_t" in ckpt.extra:
            k = ckpt.params["prototypes"].shape[0]
            self.assignments = ClusterAssignments(*(ckpt.extra[f"assign.z_{m}"].astype(np.int64) for m in "tpr"), k)
        self.epoch = ckpt.epoch
        self.history = [dict(h) for h in ckpt.history]
        return self

    # training -------------------------------------------------------------

    @property
    def bank(self) -> PrototypeBank:
        return PrototypeBank(self.params["prototypes"].data.astype(np.float64), self.cfg.tau2)

    def refresh(self, ct, pet, rna):
        t, p, r = embed_arrays(self.params, self.enc_cfg, ct, pet, rna)
        self.assignments, result = refresh_assignments(t, p, r, self.bank, max_iters=self.cfg.kmeans_iters)
        log.debug("kmeans refresh at epoch %d: inertia %.4f after %d iterations", self.epoch, result.inertia, result.iterations)

    def train_epoch(self, ct, pet, rna) -> dict:
        cfg = self.cfg
        n = len(ct)
        if self.assignments is None or self.epoch % cfg.kmeans_refresh_every == 0:
            self.refresh(ct, pet, rna)
        order = np.random.default_rng([cfg.seed, self.epoch]).permutation(n)
        mpe_cfg = MpeConfig(cfg.tau1, cfg.symmetric_mpe)
        sums = {"l_mpe": 0.0, "l_cpm": 0.0, "l_total": 0.0}
        batches = 0
        for start in range(0, n, cfg.batch_size):
            idx = np.sort(order[start : start + cfg.batch_size])
            self.optimizer.zero_grad()
            # a zero-weighted term is evaluated on detached inputs so it cannot touch any update
            live = self.params
            t, p, r = encode_modalities(live, self.enc_cfg, ct[idx], pet[idx], rna[idx])
            if cfg.alpha1 > 0:
                l_mpe = mpe_objective(t, p, r, mpe_cfg)
            else:
                l_mpe = mpe_objective(Tensor(t.data), Tensor(p.data), Tensor(r.data), mpe_cfg)
            assigns = self.assignments.subset(idx)
            if cfg.alpha2 > 0:
                l_cpm = cpm_objective(t, p, r, live["prototypes"], cfg.tau2, assigns)
            else:
                l_cpm = cpm_objective(Tensor(t.data), Tensor(p.data), Tensor(r.data), Tensor(live["prototypes"].data), cfg.tau2, assigns)
            for term, val in (("l_mpe", l_mpe), ("l_cpm", l_cpm)):
                if not np.isfinite(val.data):
                    raise NonFiniteLossError(term, self.epoch, float(val.data))
            if cfg.alpha1 > 0 and cfg.alpha2 > 0:
                total = l_mpe * cfg.alpha1 + l_cpm * cfg.alpha2
            elif cfg.alpha1 > 0:
                total = l_mpe * cfg.alpha1
            else:
                total = l_cpm * cfg.alpha2
            if not np.isfinite(total.data):
                raise NonFiniteLossError("l_total", self.epoch, float(total.data))
            total.backward()
            self.optimizer.step()
            if cfg.alpha2 > 0:
                protos = self.params["prototypes"]
                protos.data = (l2_normalize_rows(Tensor(protos.data)).data).astype(protos.data.dtype)
            sums["l_mpe"] += float(l_mpe.data)
            sums["l_cpm"] += float(l_cpm.data)
            sums["l_total"] += float(total.data)
            batches += 1
        entry = {"epoch": self.epoch, **{k: v / batches for k, v in sums.items()}}
        self.history.append(entry)
        self.epoch += 1
        return entry

    def fit(self, ct, pet, rna, epochs: int | None = None, callback=None):
        for _ in range(self.cfg.epochs if epochs is None else epochs):
            entry = self.train_epoch(ct, pet, rna)
            log.info("epoch %d  l_mpe=%.4f  l_cpm=%.4f  l_total=%.4f", entry["epoch"], entry["l_mpe"], entry["l_cpm"], entry["l_total"])
            if callback is not None:
                callback(entry)
        return self


def run_pretraining(cohort, enc_cfg: EncoderConfig, cfg: PretrainConfig, resume: Checkpoint | None = None, epochs: int | None = None) -> Checkpoint:
    """Train encoders, projections and prototypes on complete triplets.

    ``cohort`` is a :class:`~modalsurv.data.CohortArrays`. With ``resume`` the
    run continues from that checkpoint's epoch; ``epochs`` then counts the
    additional epochs (default: up to ``cfg.epochs`` in total).
    """
    if len(cohort.ids) == 0:
        raise ValueError("empty cohort")
    if not cohort.present.all():
        missing = [pid for pid, ok in zip(cohort.ids, cohort.present.all(axis=1)) if not ok]
        raise ValueError(f"pretraining needs complete triplets; incomplete: {missing[:5]}")
    trainer = Pretrainer(enc_cfg, cfg) if resume is None else Pretrainer.from_checkpoint(resume, cfg)
    if epochs is None:
        epochs = max(0, cfg.epochs - trainer.epoch)
    trainer.fit(cohort.ct, cohort.pet, cohort.rna, epochs)
    return trainer.to_checkpoint()


def fine_tune_end_to_end(cohort, ckpt: Checkpoint, cfg):
    """Train encoders, projections and a Cox head jointly on survival labels.

    ``cfg`` is a :class:`~modalsurv.survival.SurvivalConfig`. Returns the updated
    encoder parameters (float32, prototypes untouched) and the head result.
    Like pretraining, this needs every patient to have all three modalities.
    """
    from .survival import CoxHead, HeadTrainingResult, cox_partial_likelihood, head_forward

    if not cohort.present.all():
        raise ValueError("end-to-end fine-tuning needs complete triplets")
    enc_cfg = EncoderConfig(**ckpt.config["encoder"])
    trainable = {k: Tensor(v.astype(np.float64), requires_grad=True, name=k)
                 for k, v in ckpt.params.items() if k != "prototypes" and not k.startswith("head.")}
    head = CoxHead.init(3 * enc_cfg.projection_dim, cfg.hidden or None, cfg.seed)
    trainable.update({k: Tensor(v, requires_grad=True, name=k) for k, v in head.params().items()})
    opt = Adam(trainable, lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    n = len(cohort.ids)
    bs = cfg.batch_size or n
    losses = []
    for epoch in range(cfg.epochs):
        order = np.random.default_rng([cfg.seed, epoch]).permutation(n) if bs < n else np.arange(n)
        total = 0.0
        for start in range(0, n, bs):
            idx = np.sort(order[start : start + bs])
            if not cohort.event[idx].any():
                continue
            opt.zero_grad()
            t, p, r = encode_modalities(trainable, enc_cfg, cohort.ct[idx], cohort.pet[idx], cohort.rna[idx])
            eta = head_forward(concat([t, p, r], axis=-1), trainable)
            loss = cox_partial_likelihood(eta, cohort.time[idx], cohort.event[idx])
            if not np.isfinite(loss.data):
                raise NonFiniteLossError("l_cox", epoch, float(loss.data))
            loss.backward()
            opt.step()
            total += float(loss.data)
        losses.append(total)
    head = CoxHead.from_params({k: v.data for k, v in trainable.items() if k.startswith("head.")})
    params = {k: v.data.astype(np.float32) for k, v in trainable.items() if not k.startswith("head.")}
    params["prototypes"] = ckpt.params["prototypes"]
    return params, HeadTrainingResult(head, losses)
