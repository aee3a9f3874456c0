"""One-vs-rest classification metrics, ROC/AUC, fold CIs and uncertainty-grade analysis.

Undefined ratios (no positives, no negatives, empty grades) come back as
``nan`` rather than 0.
"""

from __future__ import annotations

from dataclasses import dataclass
from statistics import NormalDist
from typing import Sequence

import numpy as np

from .errors import ValidationError
from .evidential import N_GRADES, dirichlet_summary, grade_of

CONFIDENT_WRONG = "confident-wrong"
HESITANT_RIGHT = "hesitant-right"


@dataclass(frozen=True)
class PredictionRecord:
    id: str
    true_class: int
    predicted_class: int
    probs: tuple[float, ...]
    uncertainty: float
    grade: int

    def __post_init__(self):
        if abs(sum(self.probs) - 1.0) > 1e-9:
            raise ValidationError(f"{self.id}: probabilities sum to {sum(self.probs)}")
        if grade_of(self.uncertainty) != self.grade:
            raise ValidationError(f"{self.id}: grade {self.grade} inconsistent with uncertainty {self.uncertainty}")

    @property
    def correct(self) -> bool:
        return self.true_class == self.predicted_class


def predictions_from_evidence(ids: Sequence[str], labels: Sequence[int], evidence: np.ndarray) -> list[PredictionRecord]:
    probs, u, grades, pred = dirichlet_summary(evidence)
    return [
        PredictionRecord(str(i), int(t), int(p), tuple(float(x) for x in row), float(ui), int(g))
        for i, t, p, row, ui, g in zip(ids, labels, pred, probs, u, grades)
    ]


@dataclass(frozen=True)
class ClassMetrics:
    accuracy: float
    sensitivity: float
    specificity: float
    auc: float
    roc_points: list[tuple[float, float, float]]


def _ratio(num: int, den: int) -> float:
    return num / den if den else float("nan")


def one_vs_rest_confusion_metrics(preds: Sequence[PredictionRecord], class_index: int) -> tuple[float, float, float]:
    """(accuracy, sensitivity, specificity) with ``class_index`` as the positive class."""
    if not preds:
        raise ValidationError("no predictions")
    truth = np.array([p.true_class == class_index for p in preds])
    called = np.array([p.predicted_class == class_index for p in preds])
    tp = int(np.sum(truth & called))
    tn = int(np.sum(~truth & ~called))
    fp = int(np.sum(~truth & called))
    fn = int(np.sum(truth & ~called))
    return (tp + tn) / len(preds), _ratio(tp, tp + fn), _ratio(tn, tn + fp)


def roc_auc(scores, labels) -> tuple[float, list[tuple[float, float, float]]]:
    """Trapezoidal ROC AUC and the curve's ``(fpr, tpr, threshold)`` points.

    A subject is called positive when its score is >= the threshold.  The
    curve starts at ``(0, 0, inf)`` and has one point per distinct score,
    so tied scores form a single diagonal segment (the half-credit rule).
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    if s.shape != y.shape or s.ndim != 1:
        raise ValidationError("scores and labels must be equal-length vectors")
    n_pos = int(y.sum())
    n_neg = int(y.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise ValidationError("ROC needs at least one positive and one negative")
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    # last index of each run of equal scores
    ends = np.flatnonzero(np.diff(s) != 0)
    ends = np.append(ends, s.size - 1)
    tps = np.cumsum(y)[ends]
    fps = (ends + 1) - tps
    tpr = np.concatenate([[0], tps]) / n_pos
    fpr = np.concatenate([[0], fps]) / n_neg
    thresholds = np.concatenate([[np.inf], s[ends]])
    auc = float(np.sum((fpr[1:] - fpr[:-1]) * (tpr[1:] + tpr[:-1]) / 2.0))
    points = [(float(a), float(b), float(t)) for a, b, t in zip(fpr, tpr, thresholds)]
    return auc, points


def class_metrics(preds: Sequence[PredictionRecord], num_classes: int) -> list[ClassMetrics]:
    """Per-class metrics; the ROC score for class c is the Dirichlet mean alpha_c / S."""
    out = []
    for c in range(num_classes):
        acc, sens, spec = one_vs_rest_confusion_metrics(preds, c)
        labels = np.array([p.true_class == c for p in preds])
        if labels.all() or not labels.any():
            auc, points = float("nan"), []
        else:
            auc, points = roc_auc([p.probs[c] for p in preds], labels)
        out.append(ClassMetrics(acc, sens, spec, auc, points))
    return out


def macro_auc(metrics: Sequence[ClassMetrics]) -> float:
    aucs = [m.auc for m in metrics]
    return float(np.mean(aucs)) if not any(np.isnan(aucs)) else float("nan")


@dataclass(frozen=True)
class FoldSummary:
    mean: float
    sd: float
    ci_low: float
    ci_high: float
    min: float
    max: float


def fold_ci(per_fold_values: Sequence[float], level: float = 0.95) -> FoldSummary:
    """Mean, sample SD and the normal-approximation CI ``mean +/- z * SD / sqrt(k)``."""
    v = np.asarray(per_fold_values, dtype=np.float64)
    if v.size < 2:
        raise ValidationError("fold CI needs at least two values")
    if not 0 < level < 1:
        raise ValidationError("level must lie in (0, 1)")
    mean = float(v.mean())
    sd = float(v.std(ddof=1))
    half = NormalDist().inv_cdf(0.5 + level / 2.0) * sd / np.sqrt(v.size)
    return FoldSummary(mean, sd, mean - half, mean + half, float(v.min()), float(v.max()))


def bootstrap_auc_ci(scores, labels, n_boot: int = 2000, seed: int = 0, level: float = 0.95) -> tuple[float, float]:
    """Percentile bootstrap CI of the AUC over subjects.

    Resamples that miss a class are skipped rather than redrawn.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    rng = np.random.default_rng(seed)
    values = []
    for _ in range(n_boot):
        idx = rng.integers(0, s.size, size=s.size)
        yy = y[idx]
        if yy.all() or not yy.any():
            continue
        values.append(roc_auc(s[idx], yy)[0])
    if not values:
        return float("nan"), float("nan")
    lo, hi = np.quantile(values, [(1 - level) / 2, (1 + level) / 2])
    return float(lo), float(hi)


@dataclass(frozen=True)
class GradeRow:
    grade: int
    count: int
    correct_rate: float


def grade_correct_rates(preds: Sequence[PredictionRecord]) -> list[GradeRow]:
    rows = []
    for g in range(1, N_GRADES + 1):
        members = [p for p in preds if p.grade == g]
        correct = sum(p.correct for p in members)
        rows.append(GradeRow(g, len(members), _ratio(correct, len(members))))
    return rows


def flag_anomalies(preds: Sequence[PredictionRecord]) -> list[tuple[str, str]]:
    """Wrong calls made with low uncertainty (grade <= 2) and right calls made with high uncertainty (grade >= 4)."""
    flagged = []
    for p in preds:
        if not p.correct and p.grade <= 2:
            flagged.append((p.id, CONFIDENT_WRONG))
        elif p.correct and p.grade >= 4:
            flagged.append((p.id, HESITANT_RIGHT))
    return flagged


def uncertainty_summary(preds: Sequence[PredictionRecord], num_classes: int = 3) -> list[float]:
    """Median uncertainty per true class (nan for classes without predictions)."""
    out = []
    for c in range(num_classes):
        u = [p.uncertainty for p in preds if p.true_class == c]
        out.append(float(np.median(u)) if u else float("nan"))
    return out
