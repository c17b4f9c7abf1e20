"""Sum-rule score fusion, binary classification metrics and ROC analysis.

The positive class is label 1 (ALL). Metrics with a zero denominator are
reported as ``None`` and listed under ``undefined`` rather than coerced to 0.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ShapeError

METRIC_NAMES = ("accuracy", "precision", "recall", "f1", "specificity")


def sum_rule_fuse(x_i, x_m, x_e) -> np.ndarray:
    """Componentwise sum of three score vectors (or [N, K] batches), unnormalised."""
    a, b, c = (np.asarray(v, dtype=np.float64) for v in (x_i, x_m, x_e))
    if not (a.shape == b.shape == c.shape):
        raise ShapeError(f"score shapes differ: {a.shape}, {b.shape}, {c.shape}")
    return a + b + c


def decide(f):
    """Argmax over the last axis; exact ties go to label 0."""
    f = np.asarray(f)
    out = np.argmax(f, axis=-1)
    return int(out) if out.ndim == 0 else out.astype(np.int64)


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    tn: int
    fp: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    def to_dict(self) -> dict:
        return {"tp": self.tp, "tn": self.tn, "fp": self.fp, "fn": self.fn}


def confusion(y_true, y_pred) -> ConfusionCounts:
    t = np.asarray(y_true).astype(np.int64).ravel()
    p = np.asarray(y_pred).astype(np.int64).ravel()
    if t.shape != p.shape:
        raise ValueError(f"label arrays differ in length: {t.size} vs {p.size}")
    if t.size == 0:
        raise ValueError("confusion counts need at least one sample")
    return ConfusionCounts(
        tp=int(np.sum((t == 1) & (p == 1))),
        tn=int(np.sum((t == 0) & (p == 0))),
        fp=int(np.sum((t == 0) & (p == 1))),
        fn=int(np.sum((t == 1) & (p == 0))),
    )


def _ratio(num, den):
    return None if den == 0 else num / den


def accuracy(c: ConfusionCounts):
    return _ratio(c.tp + c.tn, c.total)


def precision(c: ConfusionCounts):
    return _ratio(c.tp, c.tp + c.fp)


def recall(c: ConfusionCounts):
    return _ratio(c.tp, c.tp + c.fn)


def specificity(c: ConfusionCounts):
    return _ratio(c.tn, c.tn + c.fp)


def f1(c: ConfusionCounts):
    p, r = precision(c), recall(c)
    if p is None or r is None or p + r == 0:
        return None
    return 2 * p * r / (p + r)


def roc_curve(y_true, scores) -> list:
    """(FPR, TPR) points from (0, 0) to (1, 1), one step per distinct score, descending."""
    t = np.asarray(y_true).astype(np.int64).ravel()
    s = np.asarray(scores, dtype=np.float64).ravel()
    if t.shape != s.shape:
        raise ValueError("labels and scores differ in length")
    n_pos = int((t == 1).sum())
    n_neg = int((t == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ROC undefined: y_true must contain both classes")
    order = np.argsort(-s, kind="stable")
    s, t = s[order], t[order]
    # last index of each group of tied scores
    ends = np.r_[np.nonzero(np.diff(s))[0], len(s) - 1]
    tps = np.cumsum(t == 1)[ends]
    fps = np.cumsum(t == 0)[ends]
    pts = [(0.0, 0.0)]
    pts += [(float(fp / n_neg), float(tp / n_pos)) for fp, tp in zip(fps, tps)]
    return pts


def auc(points) -> float:
    """Trapezoidal area under a piecewise-linear ROC."""
    p = np.asarray(points, dtype=np.float64)
    x, y = p[:, 0], p[:, 1]
    return float(np.sum((x[1:] - x[:-1]) * (y[1:] + y[:-1]) / 2.0))


@dataclass
class MetricsReport:
    confusion: ConfusionCounts
    roc_points: list
    auc: float | None
    accuracy: float | None = None
    precision: float | None = None
    recall: float | None = None
    f1: float | None = None
    specificity: float | None = None
    undefined: list = field(default_factory=list)

    def to_dict(self) -> dict:
        d = {name: getattr(self, name) for name in METRIC_NAMES}
        d["confusion"] = self.confusion.to_dict()
        d["roc"] = [[float(a), float(b)] for a, b in self.roc_points]
        d["auc"] = self.auc
        d["undefined"] = list(self.undefined)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"


def report_from_predictions(y_true, y_pred, positive_scores) -> MetricsReport:
    c = confusion(y_true, y_pred)
    values = {
        "accuracy": accuracy(c),
        "precision": precision(c),
        "recall": recall(c),
        "f1": f1(c),
        "specificity": specificity(c),
    }
    undefined = [k for k in METRIC_NAMES if values[k] is None]
    try:
        pts = roc_curve(y_true, positive_scores)
        area = auc(pts)
    except ValueError:
        pts, area = [], None
        undefined.append("auc")
    return MetricsReport(c, pts, area, undefined=undefined, **values)


def fused_positive_score(f) -> np.ndarray:
    """f[1] / sum(f) for fused [N, 2] scores."""
    f = np.asarray(f, dtype=np.float64)
    return f[:, 1] / f.sum(axis=1)


def predictor_scores(predictor, images) -> np.ndarray:
    """Class scores [N, K] from an ensemble (its mixture mean) or a single trained model."""
    from . import ensemble, models

    if isinstance(predictor, ensemble.Ensemble):
        return ensemble.predict_arrays(predictor, images)[0]
    if isinstance(predictor, models.TrainedModel):
        return models.predict_proba(predictor, images).astype(np.float64)
    if callable(predictor):
        return np.asarray(predictor(images), dtype=np.float64)
    raise TypeError(f"cannot score with {type(predictor).__name__}")


def evaluate_scores(score_sets, y_true) -> MetricsReport:
    """Fuse three [N, 2] score arrays and score the fused decisions."""
    if len(score_sets) != 3:
        raise ValueError("sum-rule fusion takes exactly three predictors")
    fused = sum_rule_fuse(*score_sets)
    return report_from_predictions(y_true, decide(fused), fused_positive_score(fused))


def evaluate_pipeline(predictors, images, y_true) -> MetricsReport:
    if len(images) == 0:
        raise ValueError("the test split is empty")
    return evaluate_scores([predictor_scores(p, images) for p in predictors], y_true)


# ------------------------------------------------------------------ plot data


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def roc_csv(points) -> str:
    return _csv(["fpr", "tpr"], [[repr(float(a)), repr(float(b))] for a, b in points])


def history_csv(history) -> str:
    cols = ["epoch", "train_loss", "train_acc", "val_loss", "val_acc"]
    return _csv(cols, [[rec[c] for c in cols] for rec in history])


def write_text(path, text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8", newline="\n")
    return path
