"""Command-line entry point: ``modalsurv {synth,pretrain,train,evaluate,ablate}``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import shutil
import sys
import tempfile
from contextlib import contextmanager, nullcontext
from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .config import RunConfig, load_config
from .data import CohortError, load_cohort, make_folds, synthesize_cohort
from .encoders import EncoderConfig
from .evaluation import (
    checkpoint_embeddings,
    cross_validate,
    fill_missing,
    missing_rna_ablation,
    modality_ablation,
)
from .metrics import NoComparablePairsError, kaplan_meier, logrank_test, stratify_risk
from .pretrain import NonFiniteLossError, embed_partial, fine_tune_end_to_end, run_pretraining
from .survival import breslow_baseline, fuse_embeddings, predict_risk, train_cox_head

log = logging.getLogger("modalsurv")

LOG_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING, "warning": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}


class UsageError(ValueError):
    pass


# output helpers ----------------------------------------------------------------


@contextmanager
def atomic_dir(out):
    """Yield a scratch directory whose files replace those in ``out`` on success."""
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{out.name}.", dir=out.parent))
    try:
        yield tmp
        out.mkdir(parents=True, exist_ok=True)
        for item in sorted(tmp.iterdir()):
            os.replace(item, out / item.name)
    finally:
        shutil.rmtree(tmp, ignore_errors=True)


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return str(v)


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            values = [row[h] for h in header] if isinstance(row, dict) else row
            w.writerow([_fmt(v) for v in values])


def write_json(path, doc):
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


# shared steps ------------------------------------------------------------------


def _manifest_path(cfg: RunConfig):
    if not cfg.paths.manifest:
        raise UsageError("no cohort manifest given (use --manifest or [paths] manifest)")
    return Path(cfg.paths.manifest)


def _checkpoint(cfg: RunConfig) -> Checkpoint:
    if not cfg.paths.checkpoint:
        raise UsageError("no checkpoint given (use --checkpoint or [paths] checkpoint)")
    return load_checkpoint(cfg.paths.checkpoint)


def _frozen_only(cfg: RunConfig):
    if cfg.survival.fine_tune:
        log.warning("survival.fine_tune only applies to 'train'; cross-validation uses frozen embeddings")


def _embeddings(cfg: RunConfig):
    man = load_cohort(_manifest_path(cfg))
    arrays = man.load_arrays()
    t, p, r = checkpoint_embeddings(_checkpoint(cfg), arrays)
    t, p, r = fill_missing(t, p, r, "average")
    return man, arrays, (t, p, r)


# subcommands -------------------------------------------------------------------


def cmd_synth(cfg: RunConfig, args) -> None:
    out = Path(cfg.paths.out)
    with atomic_dir(out) as tmp:
        manifest = synthesize_cohort(tmp, cfg.synth)
        load_cohort(manifest)
    log.info("wrote %d-patient cohort to %s", cfg.synth.n, out)


def cmd_pretrain(cfg: RunConfig, args) -> None:
    arrays = load_cohort(_manifest_path(cfg)).load_arrays()
    resume = load_checkpoint(args.resume) if args.resume else None
    # a resumed run keeps the encoder layout stored in its checkpoint
    enc = EncoderConfig(**resume.config["encoder"]) if resume is not None else cfg.encoder
    if args.epochs is not None and args.epochs < 0:
        raise UsageError("--epochs must be nonnegative")
    ckpt = run_pretraining(arrays, enc, cfg.pretrain, resume=resume, epochs=args.epochs)
    with atomic_dir(cfg.paths.out) as tmp:
        save_checkpoint(ckpt, tmp / "pretrain.ckpt")
        write_csv(tmp / "pretrain_loss.csv", ["epoch", "l_mpe", "l_cpm", "l_total"], ckpt.history)


def cmd_train(cfg: RunConfig, args) -> None:
    """Fit a Cox head on the whole cohort and append it to the checkpoint."""
    ckpt = _checkpoint(cfg)
    if cfg.survival.fine_tune:
        arrays = load_cohort(_manifest_path(cfg)).load_arrays()
        enc_params, res = fine_tune_end_to_end(arrays, ckpt, cfg.survival)
        t, p, r = embed_partial(enc_params, EncoderConfig(**ckpt.config["encoder"]), arrays)
    else:
        _, arrays, (t, p, r) = _embeddings(cfg)
        enc_params = {k: v for k, v in ckpt.params.items() if not k.startswith("head.")}
        res = None
    fused = fuse_embeddings(t, p, r)
    labels = (arrays.time, arrays.event)
    if res is None:
        res = train_cox_head(fused, labels, cfg.survival)
    eta = np.atleast_1d(predict_risk(fused, res.head))
    base = breslow_baseline(eta, labels)
    params = dict(enc_params)
    params.update(res.head.params())
    config = dict(ckpt.config, survival=cfg.to_dict()["survival"])
    out_ckpt = Checkpoint(params, config, ckpt.epoch, ckpt.history, ckpt.optimizer, ckpt.optimizer_step, ckpt.extra, ckpt.meta)
    with atomic_dir(cfg.paths.out) as tmp:
        save_checkpoint(out_ckpt, tmp / "model.ckpt")
        write_csv(tmp / "head_loss.csv", ["epoch", "loss"], list(enumerate(res.losses)))
        write_csv(tmp / "baseline_hazard.csv", ["time", "cumulative_hazard"], zip(base.event_times, base.cumulative_hazard))


def _oracle_scores(man):
    u = man.latent_risk()
    if u is None:
        raise UsageError("--oracle-scores needs a manifest with latent_risk values")
    return -u


def cmd_evaluate(cfg: RunConfig, args) -> None:
    _frozen_only(cfg)
    man = load_cohort(_manifest_path(cfg))
    arrays = man.load_arrays()
    folds = make_folds(man, cfg.metrics.fold_count, cfg.seed)
    if args.oracle_scores:
        fused, scores = None, _oracle_scores(man)
    else:
        t, p, r = checkpoint_embeddings(_checkpoint(cfg), arrays)
        fused, scores = fuse_embeddings(*fill_missing(t, p, r, "average")), None
    res = cross_validate(fused, arrays.time, arrays.event, folds, cfg.survival, cfg.metrics.tie_credit, scores=scores)
    groups = stratify_risk(res.risk)
    km_rows = []
    for name, idx in (("low", groups.low), ("high", groups.high)):
        if idx.size == 0:
            continue
        km = kaplan_meier((arrays.time[idx], arrays.event[idx]))
        km_rows += [{"group": name, "time": a, "survival": b, "at_risk": c, "events": d}
                    for a, b, c, d in zip(km.times, km.survival, km.at_risk, km.events)]
    if groups.degenerate:
        log.warning("risk scores are all tied; the log-rank test is skipped")
        lr = None
    else:
        try:
            lr = logrank_test((arrays.time[groups.low], arrays.event[groups.low]), (arrays.time[groups.high], arrays.event[groups.high]))
        except ValueError as exc:
            log.warning("log-rank test skipped: %s", exc)
            lr = None
    with atomic_dir(cfg.paths.out) as tmp:
        write_csv(tmp / "folds.csv", ["fold", "c_index", "valid", "n_test"], res.folds)
        write_json(tmp / "summary.json", {
            "mean": res.mean,
            "std": res.std,
            "folds": len(res.folds),
            "valid_folds": len(res.valid_scores),
            "tie_credit": cfg.metrics.tie_credit,
            "scores": "oracle" if args.oracle_scores else "model",
        })
        write_csv(tmp / "km.csv", ["group", "time", "survival", "at_risk", "events"], km_rows)
        write_json(tmp / "logrank.json", None if lr is None else {
            "chi_square": lr.chi_square,
            "p_value": lr.p_value,
            "observed_low": lr.observed_a,
            "expected_low": lr.expected_a,
            "threshold": groups.threshold,
        })
    log.info("C-index %.4f +- %.4f over %d folds", res.mean, res.std, len(res.valid_scores))


def cmd_ablate(cfg: RunConfig, args) -> None:
    _frozen_only(cfg)
    man, arrays, (t, p, r) = _embeddings(cfg)
    folds = make_folds(man, cfg.metrics.fold_count, cfg.seed)
    tie = cfg.metrics.tie_credit
    table2 = [row for row in modality_ablation(t, p, r, arrays.time, arrays.event, folds, cfg.survival, tie)
              if row["modalities"] in cfg.ablation.subsets]
    table3 = missing_rna_ablation(t, p, r, arrays.time, arrays.event, folds, cfg.ablation.percentages,
                                  cfg.ablation.strategy, cfg.seed, cfg.survival, tie)
    with atomic_dir(cfg.paths.out) as tmp:
        write_csv(tmp / "table2_modalities.csv", ["modalities", "mean", "std"], table2)
        write_csv(tmp / "table3_missing_rna.csv", ["percent", "replaced", "strategy", "mean", "std"], table3)


COMMANDS = {
    "synth": cmd_synth,
    "pretrain": cmd_pretrain,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML run configuration")
    common.add_argument("--seed", type=int, help="overrides every seed in the config")
    common.add_argument("--out", help="output directory")
    common.add_argument("--threads", type=int, help="cap BLAS/OpenMP threads")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config value (repeatable)")

    parser = argparse.ArgumentParser(prog="modalsurv", description="Multimodal survival pretraining and evaluation.")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[common], help="write a synthetic cohort")
    pre = sub.add_parser("pretrain", parents=[common], help="self-supervised encoder pretraining")
    pre.add_argument("--manifest")
    pre.add_argument("--resume", help="continue from this checkpoint")
    pre.add_argument("--epochs", type=int, help="epochs to run now (default: up to [pretrain] epochs)")
    for name, text in (("train", "fit a Cox head on the whole cohort"),
                       ("evaluate", "cross-validated C-index, KM curves and log-rank test"),
                       ("ablate", "modality-subset and missing-RNA tables")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--manifest")
        p.add_argument("--checkpoint")
        if name == "evaluate":
            p.add_argument("--oracle-scores", action="store_true", help="score folds with the stored latent risk")
    return parser


def _configure_logging():
    level = os.environ.get("MODALSURV_LOG", "warn").lower()
    if level not in LOG_LEVELS:
        raise UsageError(f"MODALSURV_LOG must be one of {sorted(LOG_LEVELS)}")
    logging.basicConfig(level=LOG_LEVELS[level], format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr, force=True)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        _configure_logging()
        overrides = list(args.overrides)
        for key in ("manifest", "checkpoint"):
            if getattr(args, key, None):
                overrides.append(f"paths.{key}={json.dumps(getattr(args, key))}")
        cfg = load_config(args.config, overrides, seed=args.seed, out=args.out)
        if args.threads is not None:
            from threadpoolctl import threadpool_limits

            limits = threadpool_limits(args.threads)
        else:
            limits = nullcontext()
        with limits:
            COMMANDS[args.command](cfg, args)
    except NonFiniteLossError as exc:
        print(f"error: {exc} (term {exc.term})", file=sys.stderr)
        return 3
    except (UsageError, CohortError, CheckpointError, NoComparablePairsError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
