"""Attention-based interpretation: intra-modal (over 0.5 s windows),
cross-modal (over modalities) and inter-epoch (over sequence positions)
scores, plus CSV / JSON / SVG export.

Every score is a scaled dot product softmax(q . k_i / sqrt(E)) between a
CLS representation and the representations it aggregates, recomputed from
the forward-pass cache rather than read from the multi-head weights.
"""

from __future__ import annotations

import csv
import json
import math
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .autograd import Tensor
from .errors import InputError, UsageError
from .model import EpochCache, EpochCmt, SequenceCache, SequenceCmt, softmax_np
from .signal import STAGES


def _scaled_dot_softmax(query: np.ndarray, keys: np.ndarray) -> np.ndarray:
    query = np.asarray(query, dtype=np.float64)
    keys = np.asarray(keys, dtype=np.float64)
    logits = keys @ query / math.sqrt(query.shape[-1])
    return softmax_np(logits)


def intra_modal_scores(cls_repr, window_reprs) -> np.ndarray:
    """One score per window: softmax_i(cls . Z_i / sqrt(E))."""
    return _scaled_dot_softmax(cls_repr, window_reprs)


def cross_modal_scores(cross_cls_repr, modality_cls_reprs) -> np.ndarray:
    """One score per modality from the cross-modal block outputs."""
    return _scaled_dot_softmax(cross_cls_repr, modality_cls_reprs)


def inter_epoch_scores(cls_per_epoch) -> np.ndarray:
    """(L, L) matrix; row q is the distribution of epoch q over all epochs."""
    reps = np.asarray(cls_per_epoch, dtype=np.float64)
    return softmax_np(reps @ reps.T / math.sqrt(reps.shape[-1]))


@dataclass
class AttentionReport:
    sequence_id: str
    modalities: list[str]
    intra: np.ndarray          # (L, M, windows)
    cross: np.ndarray          # (L, M)
    inter: np.ndarray | None   # (L, L); None for the epoch model
    probabilities: np.ndarray  # (L, classes)
    labels: np.ndarray | None = None   # true labels, when known
    signals: np.ndarray | None = None  # (L, T, M), for rendering

    @property
    def predicted(self) -> np.ndarray:
        return self.probabilities.argmax(axis=-1)

    def to_dict(self) -> dict:
        return {
            "sequence_id": self.sequence_id,
            "modalities": list(self.modalities),
            "predicted": [STAGES[i] for i in self.predicted],
            "labels": None if self.labels is None else [STAGES[int(i)] for i in self.labels],
            "probabilities": self.probabilities.tolist(),
            "intra": self.intra.tolist(),
            "cross": self.cross.tolist(),
            "inter": None if self.inter is None else self.inter.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AttentionReport":
        return cls(
            sequence_id=d["sequence_id"],
            modalities=list(d["modalities"]),
            intra=np.asarray(d["intra"], dtype=np.float64),
            cross=np.asarray(d["cross"], dtype=np.float64),
            inter=None if d["inter"] is None else np.asarray(d["inter"], dtype=np.float64),
            probabilities=np.asarray(d["probabilities"], dtype=np.float64),
            labels=None if d.get("labels") is None else np.array([STAGES.index(s) for s in d["labels"]]),
        )


def _epoch_scores(intra: np.ndarray, cross: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Scores for one epoch from its cached (M, 1+W, E) and (1+M, E) arrays."""
    intra_scores = np.stack([intra_modal_scores(intra[m, 0], intra[m, 1:]) for m in range(intra.shape[0])])
    return intra_scores, cross_modal_scores(cross[0], cross[1:])


def reports_from_cache(cache: EpochCache | SequenceCache | None, logits: np.ndarray, modalities: list[str],
                       sequence_ids: Sequence[str], labels: np.ndarray | None = None,
                       signals: np.ndarray | None = None) -> list[AttentionReport]:
    """Build one report per batch item from a forward-pass cache."""
    if cache is None:
        raise UsageError("no forward cache: run model.forward(...) and pass the returned cache")
    probs = softmax_np(np.asarray(logits, dtype=np.float64))
    reports = []
    for b, sid in enumerate(sequence_ids):
        if isinstance(cache, SequenceCache):
            per = [_epoch_scores(cache.intra[b, l], cache.cross[b, l]) for l in range(cache.intra.shape[1])]
            intra = np.stack([p[0] for p in per])
            cross = np.stack([p[1] for p in per])
            inter = inter_epoch_scores(cache.inter[b])
            p = probs[b]
        else:
            i, c = _epoch_scores(cache.intra[b], cache.cross[b])
            intra, cross, inter = i[None], c[None], None
            p = probs[b][None]
        reports.append(AttentionReport(
            sid, list(modalities), intra, cross, inter, p,
            None if labels is None else np.asarray(labels[b]).reshape(-1),
            None if signals is None else np.asarray(signals[b]).reshape(len(p), *np.shape(signals[b])[-2:]),
        ))
    return reports


def interpret(model: EpochCmt | SequenceCmt, x: np.ndarray, sequence_ids: Sequence[str],
              labels: np.ndarray | None = None) -> list[AttentionReport]:
    """Eval-mode forward with caching, then scores for every batch item."""
    x = np.asarray(x, dtype=np.float32)
    if len(x) != len(sequence_ids):
        raise InputError(f"{len(x)} inputs but {len(sequence_ids)} sequence ids")
    was_training = model.training
    model.eval()
    try:
        logits, cache = model.forward(Tensor(x))
    finally:
        model.train(was_training)
    return reports_from_cache(cache, logits.data, model.cfg.modalities, sequence_ids, labels, x)


# -- export -----------------------------------------------------------------

def _stem(sequence_id: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]+", "_", sequence_id)


def export_report(report: AttentionReport, fmt: str, out_dir: str | Path) -> list[Path]:
    """Write ``report`` as ``csv`` (intra/cross/inter tables), ``json`` or ``svg``."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc
    stem = _stem(report.sequence_id)
    if fmt == "json":
        path = out / f"{stem}.json"
        path.write_text(json.dumps(report.to_dict(), indent=1) + "\n", encoding="utf-8")
        return [path]
    if fmt == "csv":
        return _export_csv(report, out, stem)
    if fmt == "svg":
        path = out / f"{stem}.svg"
        path.write_text(render_svg(report), encoding="utf-8")
        return [path]
    raise UsageError(f"unknown export format {fmt!r} (expected csv, json or svg)")


def _export_csv(report: AttentionReport, out: Path, stem: str) -> list[Path]:
    sid = report.sequence_id
    paths = [out / f"{stem}_intra.csv", out / f"{stem}_cross.csv"]
    with open(paths[0], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["sequence_id", "epoch_idx", "modality", "window_idx", "score"])
        for l in range(report.intra.shape[0]):
            for m, name in enumerate(report.modalities):
                for i, s in enumerate(report.intra[l, m]):
                    w.writerow([sid, l, name, i, f"{s:.9f}"])
    with open(paths[1], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["sequence_id", "epoch_idx", "modality", "score"])
        for l in range(report.cross.shape[0]):
            for m, name in enumerate(report.modalities):
                w.writerow([sid, l, name, f"{report.cross[l, m]:.9f}"])
    if report.inter is not None:
        paths.append(out / f"{stem}_inter.csv")
        with open(paths[-1], "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["sequence_id", "query_epoch", "key_epoch", "score"])
            for q in range(report.inter.shape[0]):
                for k in range(report.inter.shape[1]):
                    w.writerow([sid, q, k, f"{report.inter[q, k]:.9f}"])
    return paths


EPOCH_W = 300
TRACE_H = 50
BAR_H = 40


def window_opacity(scores: np.ndarray) -> np.ndarray:
    """Rendering rule: opacity of window i is score_i / max_j score_j."""
    peak = float(np.max(scores))
    return scores / peak if peak > 0 else np.zeros_like(scores)


def render_svg(report: AttentionReport) -> str:
    """Signal traces shaded white-to-red by intra-modal score, red bars for
    cross-modal scores and blue bars for inter-epoch scores."""
    n_ep, n_mod, n_win = report.intra.shape
    height = 30 + n_mod * (TRACE_H + 10) + 2 * (BAR_H + 25)
    width = n_ep * (EPOCH_W + 20) + 20
    el = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
          f'data-sequence="{report.sequence_id}">',
          f'<rect x="0" y="0" width="{width}" height="{height}" fill="#ffffff"/>']
    win_w = EPOCH_W / n_win
    for l in range(n_ep):
        x0 = 20 + l * (EPOCH_W + 20)
        title = STAGES[int(report.predicted[l])]
        if report.labels is not None:
            title += f" (true {STAGES[int(report.labels[l])]})"
        el.append(f'<text x="{x0}" y="16" font-size="12">epoch {l + 1}: {title}</text>')
        for m, name in enumerate(report.modalities):
            y0 = 24 + m * (TRACE_H + 10)
            alpha = window_opacity(report.intra[l, m])
            for i in range(n_win):
                el.append(f'<rect class="intra" data-epoch="{l}" data-modality="{name}" data-window="{i}" '
                          f'x="{x0 + i * win_w:.3f}" y="{y0}" width="{win_w:.3f}" height="{TRACE_H}" '
                          f'fill="#d62728" fill-opacity="{alpha[i]:.6f}"/>')
            if report.signals is not None:
                sig = np.asarray(report.signals[l, :, m], dtype=np.float64)
                step = max(1, len(sig) // EPOCH_W)
                pts = sig[::step]
                span = float(np.max(np.abs(pts))) or 1.0
                coords = " ".join(f"{x0 + j * EPOCH_W / len(pts):.2f},{y0 + TRACE_H / 2 - v / span * TRACE_H / 2:.2f}"
                                  for j, v in enumerate(pts))
                el.append(f'<polyline class="trace" points="{coords}" fill="none" stroke="#000000" '
                          f'stroke-width="0.6"/>')
            el.append(f'<text x="{x0 + 2}" y="{y0 + 10}" font-size="9">{name}</text>')
        yb = 30 + n_mod * (TRACE_H + 10)
        _bars(el, "cross", l, report.cross[l], list(report.modalities), x0, yb, "#d62728")
        if report.inter is not None:
            _bars(el, "inter", l, report.inter[l], [str(k + 1) for k in range(n_ep)], x0, yb + BAR_H + 25,
                  "#1f77b4")
    el.append("</svg>")
    return "\n".join(el) + "\n"


def _bars(el: list[str], kind: str, epoch: int, scores: np.ndarray, names: list[str], x0: float, y0: float,
          colour: str) -> None:
    bw = min(40.0, EPOCH_W / max(1, len(scores)) - 4)
    for j, (s, name) in enumerate(zip(scores, names)):
        h = float(s) * BAR_H
        x = x0 + j * (bw + 4)
        el.append(f'<rect class="{kind}" data-epoch="{epoch}" data-key="{name}" data-score="{s:.6f}" '
                  f'x="{x:.2f}" y="{y0 + BAR_H - h:.2f}" width="{bw:.2f}" height="{h:.2f}" fill="{colour}"/>')
        el.append(f'<text x="{x:.2f}" y="{y0 + BAR_H + 10:.2f}" font-size="8">{name}</text>')
