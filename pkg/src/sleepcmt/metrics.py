"""Confusion-matrix metrics: ACC, Cohen's kappa, macro F1, macro
sensitivity/specificity, macro G-mean and per-class F1."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import InputError
from .signal import STAGES

log = logging.getLogger(__name__)

N_CLASSES = len(STAGES)


@dataclass
class ConfusionMatrix:
    """Rows are true classes, columns predicted classes."""

    counts: np.ndarray = field(default_factory=lambda: np.zeros((N_CLASSES, N_CLASSES), dtype=np.int64))

    def __post_init__(self) -> None:
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.ndim != 2 or self.counts.shape[0] != self.counts.shape[1]:
            raise InputError(f"confusion matrix must be square, got {self.counts.shape}")
        if (self.counts < 0).any():
            raise InputError("confusion matrix has negative counts")

    @property
    def n_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def accumulate(self, true: int, pred: int) -> "ConfusionMatrix":
        n = self.n_classes
        if not (0 <= true < n and 0 <= pred < n):
            raise InputError(f"class out of range [0, {n}): true={true}, pred={pred}")
        self.counts[true, pred] += 1
        return self

    def update(self, true, pred) -> "ConfusionMatrix":
        true = np.asarray(true, dtype=np.int64).reshape(-1)
        pred = np.asarray(pred, dtype=np.int64).reshape(-1)
        n = self.n_classes
        if true.size and (true.min() < 0 or true.max() >= n or pred.min() < 0 or pred.max() >= n):
            raise InputError(f"class out of range [0, {n})")
        np.add.at(self.counts, (true, pred), 1)
        return self

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.counts + other.counts)

    @classmethod
    def from_predictions(cls, true, pred, n_classes: int = N_CLASSES) -> "ConfusionMatrix":
        return cls(np.zeros((n_classes, n_classes), dtype=np.int64)).update(true, pred)


def _safe_div(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    num = np.asarray(num, dtype=np.float64)
    den = np.asarray(den, dtype=np.float64)
    return np.divide(num, den, out=np.zeros_like(num), where=den != 0)


def kappa(cm: ConfusionMatrix | np.ndarray) -> float:
    """Cohen's kappa, (p_o - p_e) / (1 - p_e)."""
    c = cm.counts if isinstance(cm, ConfusionMatrix) else np.asarray(cm)
    total = c.sum()
    if total <= 0:
        raise InputError("kappa of an empty confusion matrix")
    p_o = np.trace(c) / total
    p_e = float(c.sum(axis=1) @ c.sum(axis=0)) / float(total) ** 2
    if p_e == 1.0:
        if p_o == 1.0:
            return 1.0
        raise InputError("kappa undefined: chance agreement is 1 but observed agreement is not")
    return float((p_o - p_e) / (1.0 - p_e))


def g_mean(sens: np.ndarray, spec: np.ndarray) -> float:
    """Macro G-mean as the mean of per-class sqrt(sens * spec)."""
    return float(np.mean(np.sqrt(sens * spec)))


@dataclass
class Metrics:
    acc: float
    kappa: float
    mf1: float
    sens: float
    spec: float
    mgm: float
    per_class_f1: list[float]
    per_class_sens: list[float]
    per_class_spec: list[float]
    absent_classes: list[int]

    def to_json_dict(self) -> dict:
        """The published schema, rounded to 6 decimals."""
        r = lambda v: round(float(v), 6)  # noqa: E731
        return {
            "acc": r(self.acc),
            "kappa": r(self.kappa),
            "mf1": r(self.mf1),
            "sens": r(self.sens),
            "spec": r(self.spec),
            "mgm": r(self.mgm),
            "per_class_f1": {s: r(v) for s, v in zip(STAGES, self.per_class_f1)},
        }

    def to_json(self) -> str:
        return format_metrics_json(self.to_json_dict())


def format_metrics_json(d: dict) -> str:
    """JSON with every float written in fixed 6-decimal form."""
    def fmt(v, indent):
        pad = "  " * indent
        if isinstance(v, dict):
            items = [f'{pad}  {json.dumps(k)}: {fmt(x, indent + 1)}' for k, x in v.items()]
            return "{\n" + ",\n".join(items) + f"\n{pad}}}"
        if isinstance(v, float):
            return f"{v:.6f}"
        if isinstance(v, list):
            return "[" + ", ".join(fmt(x, indent + 1) for x in v) + "]"
        return json.dumps(v)
    return fmt(d, 0) + "\n"


def compute_metrics(cm: ConfusionMatrix) -> Metrics:
    """All metrics from one confusion matrix, one-vs-rest per class.

    Zero denominators give 0 for that class; classes absent from both rows
    and columns are listed in ``absent_classes``.
    """
    c = cm.counts.astype(np.float64)
    total = c.sum()
    if total <= 0:
        raise InputError("metrics of an empty confusion matrix")
    tp = np.diag(c)
    fn = c.sum(axis=1) - tp
    fp = c.sum(axis=0) - tp
    tn = total - tp - fn - fp
    sens = _safe_div(tp, tp + fn)
    spec = _safe_div(tn, tn + fp)
    prec = _safe_div(tp, tp + fp)
    f1 = _safe_div(2 * prec * sens, prec + sens)
    absent = [i for i in range(cm.n_classes) if c[i].sum() == 0 and c[:, i].sum() == 0]
    if absent:
        log.warning("event=absent_classes classes=%s", ",".join(STAGES[i] if i < len(STAGES) else str(i)
                                                               for i in absent))
    return Metrics(
        acc=float(tp.sum() / total),
        kappa=kappa(cm),
        mf1=float(f1.mean()),
        sens=float(sens.mean()),
        spec=float(spec.mean()),
        mgm=g_mean(sens, spec),
        per_class_f1=f1.tolist(),
        per_class_sens=sens.tolist(),
        per_class_spec=spec.tolist(),
        absent_classes=absent,
    )


def aggregate_cv(fold_matrices: dict[int, ConfusionMatrix], k: int = 5) -> tuple[ConfusionMatrix, Metrics]:
    """Pool per-fold confusion matrices and compute metrics on the sum."""
    missing = [f for f in range(k) if f not in fold_matrices]
    if missing:
        raise InputError(f"missing folds: {missing}")
    pooled = ConfusionMatrix(sum(fold_matrices[f].counts for f in range(k)))
    return pooled, compute_metrics(pooled)
