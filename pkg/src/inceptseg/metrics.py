"""Confusion-matrix metrics, Jaccard, ROC/AUC.

Degenerate ratios (0/0) evaluate to 0.0 and are named in ``degenerate`` so
that reports stay numeric; the one exception is Jaccard of two empty masks,
which is 1.0 (the masks agree perfectly).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple

import numpy as np

from .errors import ValidationError


class ConfusionCounts(NamedTuple):
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":  # type: ignore[override]
        return ConfusionCounts(*(a + b for a, b in zip(self, other)))


def _binary(mask, name: str) -> np.ndarray:
    arr = np.asarray(mask)
    if arr.dtype == bool:
        return arr
    if not np.isin(arr, (0, 1)).all():
        raise ValidationError(f"{name} must be binary (0/1)")
    return arr.astype(bool)


def binarize(probabilities, threshold: float = 0.5) -> np.ndarray:
    """``p >= threshold`` counts as positive."""
    return np.asarray(probabilities) >= threshold


def confusion(pred_binary, truth) -> ConfusionCounts:
    p = _binary(pred_binary, "prediction")
    t = _binary(truth, "truth")
    if p.shape != t.shape:
        raise ValidationError(f"prediction shape {p.shape} differs from truth shape {t.shape}")
    tp = int(np.count_nonzero(p & t))
    fp = int(np.count_nonzero(p & ~t))
    fn = int(np.count_nonzero(~p & t))
    return ConfusionCounts(tp, fp, p.size - tp - fp - fn, fn)


def _ratio(num: float, den: float, name: str, flags: list[str]) -> float:
    if den == 0:
        flags.append(name)
        return 0.0
    return num / den


def scalar_metrics(c: ConfusionCounts) -> tuple[dict[str, float], list[str]]:
    """Accuracy, sensitivity, specificity, precision and F1 plus degenerate flags."""
    flags: list[str] = []
    out = {
        "accuracy": _ratio(c.tp + c.tn, c.total, "accuracy", flags),
        "sensitivity": _ratio(c.tp, c.tp + c.fn, "sensitivity", flags),
        "specificity": _ratio(c.tn, c.tn + c.fp, "specificity", flags),
        "precision": _ratio(c.tp, c.tp + c.fp, "precision", flags),
    }
    p, r = out["precision"], out["sensitivity"]
    out["f1"] = _ratio(2 * p * r, p + r, "f1", flags)
    return out, flags


def jaccard(pred_binary, truth) -> tuple[float, bool]:
    """|A & B| / |A | B| and whether the value came from the empty/empty rule."""
    p = _binary(pred_binary, "prediction")
    t = _binary(truth, "truth")
    if p.shape != t.shape:
        raise ValidationError(f"prediction shape {p.shape} differs from truth shape {t.shape}")
    union = int(np.count_nonzero(p | t))
    if union == 0:
        return 1.0, True
    return int(np.count_nonzero(p & t)) / union, False


# ---------------------------------------------------------------------------
# ROC / AUC
# ---------------------------------------------------------------------------


class UndefinedAUCError(ValidationError):
    pass


@dataclass
class RocCurve:
    points: list[tuple[float, float]]
    auc: float


def _check_scores(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = _binary(labels, "labels").ravel()
    if s.shape != y.shape:
        raise ValidationError(f"{s.size} scores but {y.size} labels")
    if y.all() or not y.any():
        raise UndefinedAUCError("AUC is undefined unless both classes are present")
    return s, y


def roc_auc(scores, labels) -> RocCurve:
    """ROC over descending unique thresholds; AUC by the trapezoid rule.

    Tied scores move through one threshold together, which draws a diagonal
    segment and credits each tied positive/negative pair with one half.
    """
    s, y = _check_scores(scores, labels)
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    last_of_run = np.r_[np.flatnonzero(np.diff(s)), s.size - 1]
    tps = np.cumsum(y)[last_of_run]
    fps = (last_of_run + 1) - tps
    P, N = int(y.sum()), int((~y).sum())
    tpr = np.r_[0, tps] / P
    fpr = np.r_[0, fps] / N
    auc = float(np.sum((fpr[1:] - fpr[:-1]) * (tpr[1:] + tpr[:-1]) / 2.0))
    return RocCurve(list(zip(fpr.tolist(), tpr.tolist())), auc)


def pairwise_auc(scores, labels) -> float:
    """Brute-force P(score_pos > score_neg) with ties counted 1/2.  O(P*N)."""
    s, y = _check_scores(scores, labels)
    pos, neg = s[y][:, None], s[~y][None, :]
    wins = np.count_nonzero(pos > neg) + 0.5 * np.count_nonzero(pos == neg)
    return float(wins / (pos.size * neg.size))


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

REPORT_FIELDS = ("accuracy", "sensitivity", "specificity", "precision", "f1", "jaccard", "auc")


@dataclass
class MetricsReport:
    accuracy: float
    sensitivity: float
    specificity: float
    precision: float
    f1: float
    jaccard: float
    auc: float | None
    counts: ConfusionCounts
    degenerate: list[str] = field(default_factory=list)
    roc: RocCurve | None = None

    def as_row(self, **extra) -> dict:
        row = dict(extra)
        for k in REPORT_FIELDS:
            v = getattr(self, k)
            row[k] = "" if v is None else repr(float(v))
        row.update(self.counts._asdict())
        row["degenerate"] = ";".join(self.degenerate)
        return row


def report(pred_binary, truth, scores=None) -> MetricsReport:
    """Micro-averaged report: all pixels pooled into one confusion matrix."""
    c = confusion(pred_binary, truth)
    vals, flags = scalar_metrics(c)
    js, js_degenerate = jaccard(pred_binary, truth)
    if js_degenerate:
        flags.append("jaccard")
    roc = None
    auc = None
    if scores is not None:
        try:
            roc = roc_auc(scores, truth)
            auc = roc.auc
        except UndefinedAUCError:
            flags.append("auc")
    return MetricsReport(jaccard=js, auc=auc, counts=c, degenerate=flags, roc=roc, **vals)


def macro_report(items: Iterable[tuple[np.ndarray, np.ndarray, np.ndarray | None]]) -> MetricsReport:
    """Per-image reports averaged field by field (AUC over images where defined)."""
    reports = [report(p, t, s) for p, t, s in items]
    if not reports:
        raise ValidationError("macro_report needs at least one image")
    means = {k: float(np.mean([getattr(r, k) for r in reports])) for k in REPORT_FIELDS if k != "auc"}
    aucs = [r.auc for r in reports if r.auc is not None]
    counts = reports[0].counts
    for r in reports[1:]:
        counts = counts + r.counts
    flags = sorted({f"{k}" for r in reports for k in r.degenerate})
    return MetricsReport(auc=float(np.mean(aucs)) if aucs else None, counts=counts, degenerate=flags, **means)


def write_reports_csv(path: str | Path, rows: list[dict]) -> None:
    fields = list(rows[0].keys())
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


def write_roc_csv(path: str | Path, roc: RocCurve) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["fpr", "tpr"])
        for fpr, tpr in roc.points:
            w.writerow([repr(fpr), repr(tpr)])
