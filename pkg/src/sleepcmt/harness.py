"""Cross-validation harness: per-fold training runs with checkpoints,
resume, best-by-validation-accuracy selection and pooled metrics.

Run directory of one fold::

    config.json     effective run config (written before training starts)
    loss.csv        step,loss
    last.ckpt       latest model weights
    last.opt        optimiser moments + progress of the latest checkpoint
    best.ckpt       weights with the best validation accuracy so far
    metrics.json    validation metrics of the selected checkpoint
    confusion.json  the matching confusion matrix
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .checkpoint import load_model, read_container, save_model, write_container
from .config import RunConfig
from .dataset import FoldSplit, ProcessedDataset, ProcessedRecording, epoch_arrays, sequence_arrays, \
    subject_independent_folds
from .errors import ConfigError, InputError
from .metrics import ConfusionMatrix, Metrics, aggregate_cv, compute_metrics
from .model import EpochCmt, SequenceCmt, build_model, predict_averaged, predict_epochs
from .training import Adam, FitProgress, fit

log = logging.getLogger(__name__)


@dataclass
class FoldResult:
    fold: int
    run_dir: Path
    confusion: ConfusionMatrix
    metrics: Metrics
    steps: int


def check_compatible(cfg: RunConfig, ds: ProcessedDataset) -> None:
    """Config/dataset mismatches are reported before any training."""
    if list(cfg.model.modalities) != list(ds.modalities):
        raise ConfigError(f"model modalities {cfg.model.modalities} do not match dataset {ds.modalities}")
    if ds.recordings and ds.recordings[0].epochs.shape[1] != cfg.model.epoch_samples:
        raise ConfigError(f"dataset epochs have {ds.recordings[0].epochs.shape[1]} samples, "
                          f"model expects {cfg.model.epoch_samples}")
    if cfg.kind == "sequence":
        longest = max((r.stop - r.start for rec in ds.recordings for r in rec.runs()), default=0)
        if longest < cfg.model.seq_len:
            raise ConfigError(f"no contiguous run of {cfg.model.seq_len} epochs in the dataset "
                              f"(longest {longest})")


def load_folds(cfg: RunConfig, ds: ProcessedDataset) -> FoldSplit:
    if cfg.data.folds:
        try:
            split = FoldSplit.from_dict(json.loads(Path(cfg.data.folds).read_text(encoding="utf-8")))
        except OSError as exc:
            raise ConfigError(f"cannot read folds file: {exc}") from None
        missing = set(ds.subjects()) - set(split.assignments)
        if missing:
            raise ConfigError(f"subjects without a fold: {sorted(missing)}")
        return split
    return subject_independent_folds(ds.subjects(), cfg.data.k, cfg.data.fold_seed)


def training_arrays(cfg: RunConfig, recs: list[ProcessedRecording]) -> tuple[np.ndarray, np.ndarray]:
    if cfg.kind == "epoch":
        return epoch_arrays(recs)
    return sequence_arrays(recs, cfg.model.seq_len, mode="train")


def evaluate_model(model: EpochCmt | SequenceCmt, recs: list[ProcessedRecording]) -> ConfusionMatrix:
    """Confusion matrix over every evaluable epoch of ``recs``.

    Sequence models average probabilities over all stride-1 windows of each
    contiguous run; runs shorter than L cannot be scored and are skipped.
    """
    cm = ConfusionMatrix()
    for rec in recs:
        if isinstance(model, SequenceCmt):
            for run in rec.runs():
                if run.stop - run.start < model.cfg.seq_len:
                    log.info("event=eval_run_skipped recording=%s epochs=%d", rec.recording_id,
                             run.stop - run.start)
                    continue
                probs = predict_averaged(model, rec.epochs[run])
                cm.update(rec.labels[run], probs.argmax(axis=-1))
        elif len(rec.labels):
            cm.update(rec.labels, predict_epochs(model, rec.epochs).argmax(axis=-1))
    return cm


def write_metrics(run_dir: Path, cm: ConfusionMatrix, metrics: Metrics) -> None:
    (run_dir / "metrics.json").write_text(metrics.to_json(), encoding="utf-8")
    (run_dir / "confusion.json").write_text(
        json.dumps({"rows": "true", "cols": "pred", "counts": cm.counts.tolist(), "total": cm.total}) + "\n",
        encoding="utf-8")


def _write_loss(run_dir: Path, losses: list[tuple[int, float]]) -> None:
    lines = ["step,loss"] + [f"{s},{v:.9g}" for s, v in losses]
    (run_dir / "loss.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")


def _save_state(run_dir: Path, model, opt: Adam, prog: FitProgress, best_acc: float) -> None:
    save_model(run_dir / "last.ckpt", model, {"step": prog.step, "epoch": prog.epoch})
    header = {"format": "sleepcmt-optimizer", "adam_step": opt.state.step, "epoch": prog.epoch,
              "step": prog.step, "best_acc": best_acc, "losses": prog.losses}
    write_container(run_dir / "last.opt", header, opt.state_arrays())
    _write_loss(run_dir, prog.losses)


def run_fold(cfg: RunConfig, ds: ProcessedDataset, fold: int, split: FoldSplit | None = None,
             run_dir: str | Path | None = None, resume: bool = False,
             on_step: Callable[[FitProgress], bool | None] | None = None) -> FoldResult:
    """Train on every fold but ``fold`` and validate on ``fold``."""
    cfg.validate()
    split = split or load_folds(cfg, ds)
    if not 0 <= fold < split.k:
        raise ConfigError(f"fold must be in [0, {split.k}), got {fold}")
    check_compatible(cfg, ds)
    run_dir = Path(run_dir or Path(cfg.data.out_dir) / f"fold{fold}")
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.json").write_text(cfg.to_json(), encoding="utf-8")

    train_recs = ds.select(split.train_subjects(fold))
    val_recs = ds.select(split.fold_subjects(fold))
    x, y = training_arrays(cfg, train_recs)
    if len(x) == 0:
        raise ConfigError(f"fold {fold}: training set is empty")
    log.info("event=fold_start fold=%d train_subjects=%d val_subjects=%d train_items=%d", fold,
             len(split.train_subjects(fold)), len(split.fold_subjects(fold)), len(x))

    model = build_model(cfg.kind, cfg.model, cfg.seed)
    opt = Adam(model, cfg.train)
    prog, best_acc = FitProgress(), -1.0
    if resume and (run_dir / "last.opt").exists():
        model, _ = load_model(run_dir / "last.ckpt", expect_config=cfg.model, expect_kind=cfg.kind)
        opt = Adam(model, cfg.train)
        header, arrays = read_container(run_dir / "last.opt")
        opt.load_state(header["adam_step"], arrays)
        prog = FitProgress(header["epoch"], header["step"], [(int(s), float(v)) for s, v in header["losses"]])
        best_acc = float(header["best_acc"])
        log.info("event=resume fold=%d step=%d epoch=%d", fold, prog.step, prog.epoch)

    every = cfg.train.checkpoint_every

    def step_hook(p: FitProgress):
        if every and p.step % every == 0:
            _save_state(run_dir, model, opt, p, best_acc)
        return on_step(p) if on_step is not None else None

    def epoch_hook(p: FitProgress):
        nonlocal best_acc
        if val_recs:
            acc = compute_metrics(evaluate_model(model, val_recs)).acc if _has_labels(model, val_recs) else 0.0
            log.info("event=epoch_end fold=%d epoch=%d step=%d loss=%.6f val_acc=%.6f", fold, p.epoch, p.step,
                     p.losses[-1][1], acc)
            if acc > best_acc:
                best_acc = acc
                save_model(run_dir / "best.ckpt", model, {"step": p.step, "epoch": p.epoch, "val_acc": acc})
        _save_state(run_dir, model, opt, p, best_acc)
        model.train()

    fit(model, x, y, cfg.train, opt, prog, step_hook, epoch_hook)
    _save_state(run_dir, model, opt, prog, best_acc)

    final = model
    if (run_dir / "best.ckpt").exists():
        final, _ = load_model(run_dir / "best.ckpt", expect_config=cfg.model, expect_kind=cfg.kind)
    final.eval()
    cm = evaluate_model(final, val_recs)
    if cm.total == 0:
        raise InputError(f"fold {fold}: no evaluable validation epochs")
    metrics = compute_metrics(cm)
    write_metrics(run_dir, cm, metrics)
    log.info("event=fold_done fold=%d steps=%d acc=%.6f kappa=%.6f mf1=%.6f", fold, prog.step, metrics.acc,
             metrics.kappa, metrics.mf1)
    return FoldResult(fold, run_dir, cm, metrics, prog.step)


def _has_labels(model, recs) -> bool:
    if isinstance(model, SequenceCmt):
        return any(r.stop - r.start >= model.cfg.seq_len for rec in recs for r in rec.runs())
    return any(len(rec.labels) for rec in recs)


def _fold_worker(args):
    cfg, ds, fold, split, resume = args
    return run_fold(cfg, ds, fold, split, resume=resume)


def run_all(cfg: RunConfig, ds: ProcessedDataset, resume: bool = False,
            jobs: int = 1) -> tuple[list[FoldResult], Metrics]:
    """All folds, then metrics on the pooled confusion matrix."""
    split = load_folds(cfg, ds)
    out = Path(cfg.data.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.to_json(), encoding="utf-8")
    (out / "folds.json").write_text(json.dumps(split.to_dict(), indent=2) + "\n", encoding="utf-8")
    work = [(cfg, ds, f, split, resume) for f in range(split.k)]
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as pool:
            results = list(pool.map(_fold_worker, work))
    else:
        results = [_fold_worker(w) for w in work]
    pooled, metrics = aggregate_cv({r.fold: r.confusion for r in results}, split.k)
    write_metrics(out, pooled, metrics)
    return results, metrics
