"""Command-line interface.

    sleepcmt synth       write a synthetic raw manifest
    sleepcmt preprocess  manifest -> processed dataset
    sleepcmt split       processed dataset -> subject-independent folds.json
    sleepcmt train       train one fold or all folds
    sleepcmt evaluate    checkpoint + dataset -> metrics.json
    sleepcmt interpret   checkpoint + sequence ids -> attention reports
    sleepcmt param-count learnable parameters of both models
    sleepcmt gradcheck   finite-difference check of every differentiable op

Exit codes: 0 success, 1 user or config error, 2 internal invariant violation.
Logs are ``key=value`` lines on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import load_model
from .config import RunConfig, load_run_config, parse_overrides
from .dataset import FoldSplit, load_processed, preprocess_manifest, subject_independent_folds, write_manifest
from .errors import CmtError, InputError, InvariantError, UsageError
from .gradcheck import TOLERANCE, run_suite
from .harness import check_compatible, evaluate_model, run_all, run_fold, write_metrics
from .interpret import export_report, interpret
from .metrics import compute_metrics
from .model import EpochCmt, SequenceCmt, param_count
from .synthetic import markov_hypnogram, synthetic_recording

log = logging.getLogger("sleepcmt")

DATA_ENV = "CMT_DATA_DIR"


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on bad usage; here that code means a bug."""

    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _default_dataset() -> str | None:
    return os.environ.get(DATA_ENV) or None


def _config(args, extra: list[str], **defaults) -> RunConfig:
    overrides = parse_overrides(extra)
    return load_run_config(getattr(args, "config", None), overrides, **defaults)


def _need_dataset(path: str | None) -> str:
    if not path:
        raise UsageError(f"no dataset given: pass --dataset or set {DATA_ENV}")
    return path


def _write_json(path: Path, doc: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# -- commands ---------------------------------------------------------------

def cmd_synth(args, extra) -> int:
    if extra:
        raise UsageError(f"unexpected arguments: {extra}")
    rng = np.random.default_rng(args.seed)
    recs = []
    for i in range(args.subjects):
        labels = markov_hypnogram(args.epochs, rng)
        recs.append(synthetic_recording(f"S{i:02d}", labels, rng, f"S{i:02d}_night1",
                                        discard_rate=args.discard_rate, lead_wake=args.wake_pad,
                                        tail_wake=args.wake_pad))
    out = Path(args.out)
    write_manifest(out / "manifest.json", recs)
    _write_json(out / "synth_config.json", {"artifact_version": __version__, "seed": args.seed,
                                            "subjects": args.subjects, "epochs": args.epochs,
                                            "discard_rate": args.discard_rate, "wake_pad": args.wake_pad})
    log.info("event=synth_done recordings=%d manifest=%s", len(recs), out / "manifest.json")
    return 0


def cmd_preprocess(args, extra) -> int:
    cfg = _config(args, extra)
    summary = preprocess_manifest(args.manifest, args.out, cfg.preprocess, jobs=args.jobs)
    for row in summary["recordings"]:
        log.info("event=recording id=%s status=%s retained=%s emitted=%s discarded=%s%s", row["recording_id"],
                 row["status"], row.get("retained", 0), row.get("emitted", 0), row.get("discarded", 0),
                 f" reason={json.dumps(row['reason'])}" if "reason" in row else "")
    log.info("event=preprocess_done epochs=%d excluded=%d failed=%d out=%s", summary["total_epochs"],
             len(summary["excluded"]), len(summary["failed"]), args.out)
    if summary["recordings"] and len(summary["failed"]) == len(summary["recordings"]):
        raise InputError("every recording failed to preprocess")
    return 0


def cmd_split(args, extra) -> int:
    if extra:
        raise UsageError(f"unexpected arguments: {extra}")
    ds = load_processed(_need_dataset(args.dataset))
    split = subject_independent_folds(ds.subjects(), args.k, args.seed)
    _write_json(Path(args.out), {**split.to_dict(), "seed": args.seed, "artifact_version": __version__})
    log.info("event=split_done subjects=%d sizes=%s out=%s", len(split.assignments),
             ",".join(map(str, split.sizes())), args.out)
    return 0


def cmd_train(args, extra) -> int:
    defaults = {}
    if args.dataset or _default_dataset():
        defaults["data.dataset"] = args.dataset or _default_dataset()
    cfg = _config(args, extra, **defaults)
    ds = load_processed(_need_dataset(cfg.data.dataset))
    check_compatible(cfg, ds)
    if args.fold == "all":
        results, metrics = run_all(cfg, ds, resume=args.resume, jobs=args.jobs)
        log.info("event=cv_done folds=%d acc=%.6f kappa=%.6f mf1=%.6f", len(results), metrics.acc,
                 metrics.kappa, metrics.mf1)
    else:
        try:
            fold = int(args.fold)
        except ValueError:
            raise UsageError(f"--fold must be an integer or 'all', got {args.fold!r}") from None
        run_fold(cfg, ds, fold, resume=args.resume)
    return 0


def _folds_for(args, ds) -> FoldSplit:
    if args.folds:
        return FoldSplit.from_dict(json.loads(Path(args.folds).read_text(encoding="utf-8")))
    return subject_independent_folds(ds.subjects(), args.k, args.fold_seed)


def cmd_evaluate(args, extra) -> int:
    if extra:
        raise UsageError(f"unexpected arguments: {extra}")
    model, meta = load_model(args.checkpoint)
    ds = load_processed(_need_dataset(args.dataset or _default_dataset()))
    run = RunConfig(kind=model.kind, model=model.cfg)
    check_compatible(run, ds)
    if args.fold is None:
        recs = ds.recordings
    else:
        recs = ds.select(_folds_for(args, ds).fold_subjects(args.fold))
    cm = evaluate_model(model, recs)
    if cm.total == 0:
        raise InputError("no evaluable epochs in the selection")
    metrics = compute_metrics(cm)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_metrics(out, cm, metrics)
    _write_json(out / "evaluate_config.json", {
        "artifact_version": __version__, "checkpoint": str(args.checkpoint), "dataset": str(ds.root),
        "fold": args.fold, "folds": args.folds, "k": args.k, "fold_seed": args.fold_seed,
        "kind": model.kind, "model": model.cfg.to_dict(), "checkpoint_meta": meta})
    log.info("event=evaluate_done epochs=%d acc=%.6f kappa=%.6f mf1=%.6f out=%s", cm.total, metrics.acc,
             metrics.kappa, metrics.mf1, out / "metrics.json")
    return 0


def _parse_sequence_id(sid: str) -> tuple[str, int]:
    rec, sep, start = sid.rpartition(":")
    if not sep or not start.isdigit():
        raise UsageError(f"sequence id {sid!r} must look like RECORDING:START")
    return rec, int(start)


def cmd_interpret(args, extra) -> int:
    if extra:
        raise UsageError(f"unexpected arguments: {extra}")
    model, _ = load_model(args.checkpoint)
    scores = [s.strip() for s in args.scores.split(",") if s.strip()]
    unknown = set(scores) - {"intra", "cross", "inter"}
    if unknown:
        raise UsageError(f"unknown score types {sorted(unknown)}")
    if isinstance(model, EpochCmt) and "inter" in scores:
        raise UsageError("inter-epoch scores need a sequence-model checkpoint; this is an epoch model "
                         "(pass --scores intra,cross)")
    ds = load_processed(_need_dataset(args.dataset or _default_dataset()))
    length = model.cfg.seq_len if isinstance(model, SequenceCmt) else 1
    xs, ys = [], []
    for sid in args.sequence_ids:
        rec_id, start = _parse_sequence_id(sid)
        rec = ds.get(rec_id)
        run = next((r for r in rec.runs() if r.start <= start and start + length <= r.stop), None)
        if run is None:
            raise InputError(f"{sid}: epochs {start}..{start + length - 1} are not one contiguous run "
                             f"of {rec_id} ({len(rec.labels)} epochs)")
        x = rec.epochs[start:start + length]
        xs.append(x if length > 1 else x[0])
        ys.append(rec.labels[start:start + length])
    reports = interpret(model, np.stack(xs), list(args.sequence_ids), np.stack(ys))
    out = Path(args.out)
    written = []
    for rep in reports:
        if "inter" not in scores:
            rep.inter = None
        if "intra" not in scores:
            rep.intra = np.zeros_like(rep.intra)
        if "cross" not in scores:
            rep.cross = np.zeros_like(rep.cross)
        written += export_report(rep, args.format, out)
    _write_json(out / "interpret_config.json", {
        "artifact_version": __version__, "checkpoint": str(args.checkpoint), "dataset": str(ds.root),
        "sequence_ids": list(args.sequence_ids), "format": args.format, "scores": scores, "kind": model.kind})
    log.info("event=interpret_done reports=%d files=%d out=%s", len(reports), len(written), out)
    return 0


def cmd_param_count(args, extra) -> int:
    cfg = _config(args, extra)
    counts = {"epoch": param_count(EpochCmt(cfg.model)), "sequence": param_count(SequenceCmt(cfg.model))}
    print(json.dumps({"artifact_version": __version__, "model": cfg.model.to_dict(), "params": counts},
                     indent=2, sort_keys=True))
    return 0


def cmd_gradcheck(args, extra) -> int:
    if extra:
        raise UsageError(f"unexpected arguments: {extra}")
    results = run_suite(seed=args.seed, n_seeds=args.n_seeds, include_model=not args.no_model)
    failed = 0
    print(f"# gradcheck seed={args.seed} n_seeds={args.n_seeds} tolerance={TOLERANCE:g} "
          f"artifact_version={__version__}")
    for r in results:
        print(f"{r.op:24s} max_rel_err={r.max_rel_error:.3e} {'PASS' if r.passed else 'FAIL'}")
        failed += not r.passed
    if failed:
        raise InvariantError(f"{failed} op(s) failed the gradient check")
    return 0


# -- parser -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="sleepcmt", description="Cross-modal transformers for sleep staging.")
    p.add_argument("--version", action="version", version=f"sleepcmt {__version__}")
    p.add_argument("--log-level", default="INFO")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="write a synthetic raw manifest")
    s.add_argument("--out", required=True)
    s.add_argument("--subjects", type=int, default=5)
    s.add_argument("--epochs", type=int, default=40, help="sleep epochs per recording")
    s.add_argument("--wake-pad", type=int, default=0)
    s.add_argument("--discard-rate", type=float, default=0.0)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("preprocess", help="manifest -> processed dataset; accepts --preprocess.* overrides")
    s.add_argument("manifest")
    s.add_argument("--out", required=True)
    s.add_argument("--config")
    s.add_argument("--jobs", type=int, default=1)
    s.set_defaults(func=cmd_preprocess)

    s = sub.add_parser("split", help="subject-independent folds")
    s.add_argument("--dataset", default=_default_dataset())
    s.add_argument("--out", required=True)
    s.add_argument("--k", type=int, default=5)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_split)

    s = sub.add_parser("train", help="train one fold or all; accepts --section.key overrides")
    s.add_argument("--config")
    s.add_argument("--dataset")
    s.add_argument("--fold", default="0", help="fold index or 'all'")
    s.add_argument("--resume", action="store_true")
    s.add_argument("--jobs", type=int, default=1)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("evaluate", help="metrics of a checkpoint on a dataset or one fold")
    s.add_argument("checkpoint")
    s.add_argument("--dataset")
    s.add_argument("--fold", type=int)
    s.add_argument("--folds", help="folds.json; default derives folds from --k/--fold-seed")
    s.add_argument("--k", type=int, default=5)
    s.add_argument("--fold-seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("interpret", help="attention reports for RECORDING:START sequence ids")
    s.add_argument("checkpoint")
    s.add_argument("sequence_ids", nargs="+")
    s.add_argument("--dataset")
    s.add_argument("--format", choices=["csv", "json", "svg"], default="svg")
    s.add_argument("--scores", default="intra,cross,inter")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_interpret)

    s = sub.add_parser("param-count", help="learnable parameter counts; accepts --model.* overrides")
    s.add_argument("--config")
    s.set_defaults(func=cmd_param_count)

    s = sub.add_parser("gradcheck", help="finite-difference gradient check")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--n-seeds", type=int, default=10)
    s.add_argument("--no-model", action="store_true", help="skip the full-model check")
    s.set_defaults(func=cmd_gradcheck)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    logging.basicConfig(stream=sys.stderr, level=logging.INFO,
                        format="level=%(levelname)s logger=%(name)s %(message)s", force=True)
    try:
        args, extra = parser.parse_known_args(argv)
        logging.getLogger().setLevel(getattr(logging, str(args.log_level).upper(), logging.INFO))
        return args.func(args, extra)
    except InvariantError as exc:
        log.error("event=invariant_violation error=%s", json.dumps(str(exc)))
        return 2
    except (CmtError, OSError, KeyError) as exc:
        log.error("event=error type=%s error=%s", type(exc).__name__, json.dumps(str(exc)))
        return 1


if __name__ == "__main__":
    sys.exit(main())
