"""Confusion matrices, detection metrics, ROC/AUC and model evaluation."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .errors import DomainError, ShapeError

DEFAULT_THRESHOLD = 0.5


@dataclass(frozen=True)
class ConfusionMatrix:
    tn: int
    fp: int
    fn: int
    tp: int

    def __post_init__(self):
        if min(self.tn, self.fp, self.fn, self.tp) < 0:
            raise DomainError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tn + self.fp + self.fn + self.tp


@dataclass(frozen=True)
class Metrics:
    precision: float
    recall: float
    f1: float
    fpr: float
    fnr: float
    accuracy: float
    degenerate: tuple[str, ...] = ()


def _check_scores(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if s.shape != y.shape:
        raise DomainError(f"{len(s)} scores but {len(y)} labels")
    if len(s) == 0:
        raise DomainError("no scores")
    if not np.all((y == 0) | (y == 1)):
        raise DomainError("labels must be 0 or 1")
    return s, y.astype(bool)


def confusion(scores, labels, threshold: float = DEFAULT_THRESHOLD) -> ConfusionMatrix:
    """Tally predictions; a score equal to the threshold counts as an attack."""
    s, y = _check_scores(scores, labels)
    pred = s >= threshold
    return ConfusionMatrix(tn=int(np.sum(~pred & ~y)), fp=int(np.sum(pred & ~y)),
                           fn=int(np.sum(~pred & y)), tp=int(np.sum(pred & y)))


def metrics(cm: ConfusionMatrix) -> Metrics:
    """Precision, recall, F1, FPR, FNR and accuracy; 0/0 yields 0 and is flagged."""
    if cm.total == 0:
        raise DomainError("empty confusion matrix")
    degenerate = []

    def ratio(name, num, den):
        if den == 0:
            degenerate.append(name)
            return 0.0
        return num / den

    p = ratio("precision", cm.tp, cm.tp + cm.fp)
    r = ratio("recall", cm.tp, cm.tp + cm.fn)
    f1 = ratio("f1", 2 * p * r, p + r)
    return Metrics(p, r, f1, ratio("fpr", cm.fp, cm.fp + cm.tn),
                   ratio("fnr", cm.fn, cm.fn + cm.tp), (cm.tp + cm.tn) / cm.total,
                   tuple(degenerate))


def roc_curve(scores, labels) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(fpr, tpr, thresholds), sweeping every distinct score from high to low.

    Starts at (0, 0) with an infinite threshold.
    """
    s, y = _check_scores(scores, labels)
    pos = int(y.sum())
    neg = len(y) - pos
    if pos == 0 or neg == 0:
        raise DomainError("ROC needs both classes")
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    last_of_group = np.r_[np.nonzero(np.diff(s))[0], len(s) - 1]
    tps = np.cumsum(y)[last_of_group]
    fps = (last_of_group + 1) - tps
    fpr = np.r_[0.0, fps / neg]
    tpr = np.r_[0.0, tps / pos]
    return fpr, tpr, np.r_[np.inf, s[last_of_group]]


def roc_auc(scores, labels) -> tuple[tuple[np.ndarray, np.ndarray], float]:
    """ROC points and the trapezoidal area under them (ties get half credit)."""
    fpr, tpr, _ = roc_curve(scores, labels)
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2))
    return (fpr, tpr), auc


@dataclass
class EvalReport:
    attack: str
    confusion: ConfusionMatrix
    precision: float
    recall: float
    f1: float
    fpr: float
    fnr: float
    accuracy: float
    auc: float
    threshold: float = DEFAULT_THRESHOLD
    samples: int = 0
    degenerate: tuple[str, ...] = ()
    roc: tuple[np.ndarray, np.ndarray] | None = field(default=None, repr=False, compare=False)

    @classmethod
    def build(cls, attack: str, scores, labels, threshold: float = DEFAULT_THRESHOLD):
        cm = confusion(scores, labels, threshold)
        m = metrics(cm)
        roc, auc = roc_auc(scores, labels)
        return cls(attack, cm, m.precision, m.recall, m.f1, m.fpr, m.fnr, m.accuracy, auc,
                   threshold, cm.total, m.degenerate, roc)

    def to_dict(self) -> dict:
        d = {k: v for k, v in asdict(self).items() if k != "roc"}
        d["confusion"] = asdict(self.confusion)
        d["degenerate"] = list(self.degenerate)
        return d

    def write_roc_csv(self, sink) -> None:
        sink.write("fpr,tpr\n")
        for f, t in zip(*self.roc):
            sink.write(f"{f:.10g},{t:.10g}\n")


def scorer(engine) -> Callable[[np.ndarray], np.ndarray]:
    """Batch scoring function for a float model, quantised model or callable."""
    from . import nn, quant

    if isinstance(engine, nn.CnnModel):
        return lambda x: nn.model_forward(engine, x, "infer")
    if isinstance(engine, quant.QuantModel):
        return lambda x: quant.qmodel_predict(engine, x)
    if callable(engine):
        return engine
    raise TypeError(f"cannot score with {type(engine).__name__}")


def predict(engine, x: np.ndarray, batch_size: int = 512) -> np.ndarray:
    fn = scorer(engine)
    x = np.asarray(x)
    if len(x) == 0:
        return np.zeros(0)
    return np.concatenate([np.asarray(fn(x[i:i + batch_size]), dtype=np.float64).reshape(-1)
                           for i in range(0, len(x), batch_size)])


def evaluate_model(engine, windows, attack: str,
                   threshold: float = DEFAULT_THRESHOLD) -> EvalReport:
    """Score every window and assemble the report (float and int8 engines alike)."""
    x = getattr(windows, "x", None)
    y = getattr(windows, "y", None)
    if x is None:
        x = np.stack([w.tensor for w in windows])
        y = np.array([w.label for w in windows])
    if len(y) == 0:
        raise DomainError("empty test set")
    scores = predict(engine, x)
    if scores.shape != (len(y),):
        raise ShapeError("engine returned the wrong number of scores")
    return EvalReport.build(attack, scores, y, threshold)


EVAL_REPORT_SCHEMA = {
    "type": "object",
    "required": ["attack", "confusion", "precision", "recall", "f1", "fpr", "fnr",
                 "accuracy", "auc", "threshold", "samples"],
    "properties": {
        "attack": {"type": "string"},
        "confusion": {
            "type": "object",
            "required": ["tn", "fp", "fn", "tp"],
            "properties": {k: {"type": "integer", "minimum": 0} for k in ("tn", "fp", "fn", "tp")},
        },
        **{k: {"type": "number", "minimum": 0, "maximum": 1}
           for k in ("precision", "recall", "f1", "fpr", "fnr", "accuracy", "auc")},
        "threshold": {"type": "number"},
        "samples": {"type": "integer", "minimum": 1},
        "degenerate": {"type": "array", "items": {"type": "string"}},
    },
}
