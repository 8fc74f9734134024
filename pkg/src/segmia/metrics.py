"""Attack evaluation: ROC/PR curves, AUC, F scores, rank-based oracle."""

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class ScoredExample:
    score: float
    is_member: bool


@dataclass
class Curve:
    xs: list = field(default_factory=list)
    ys: list = field(default_factory=list)
    thresholds: list = field(default_factory=list)

    def points(self):
        return list(zip(self.xs, self.ys))


def _split_scores(examples):
    members = np.array([e.score for e in examples if e.is_member], dtype=np.float64)
    others = np.array([e.score for e in examples if not e.is_member], dtype=np.float64)
    if members.size == 0 or others.size == 0:
        raise ValueError("need at least one member and one non-member example")
    return members, others


def roc_curve(examples) -> Curve:
    """FPR/TPR sweep over the distinct scores, descending; ties grouped."""
    members, others = _split_scores(examples)
    curve = Curve(xs=[0.0], ys=[0.0], thresholds=[math.inf])
    for t in sorted(set(np.concatenate([members, others])), reverse=True):
        curve.xs.append(float((others >= t).mean()))
        curve.ys.append(float((members >= t).mean()))
        curve.thresholds.append(float(t))
    return curve


def auc(curve: Curve) -> float:
    """Trapezoidal area under the curve; expects non-decreasing x."""
    total = 0.0
    for i in range(len(curve.xs) - 1):
        dx = curve.xs[i + 1] - curve.xs[i]
        total += dx * (curve.ys[i + 1] + curve.ys[i]) / 2.0
    return total


def pr_curve(examples) -> Curve:
    """Recall/precision sweep over distinct scores (descending thresholds)."""
    members, others = _split_scores(examples)
    curve = Curve()
    for t in sorted(set(np.concatenate([members, others])), reverse=True):
        tp = int((members >= t).sum())
        fp = int((others >= t).sum())
        curve.xs.append(tp / members.size)
        curve.ys.append(tp / (tp + fp))
        curve.thresholds.append(float(t))
    return curve


def f_score(precision: float, recall: float) -> float:
    if precision + recall == 0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def max_f(curve: Curve) -> float:
    """Best F1 over the PR curve points (recall in xs, precision in ys)."""
    return max(f_score(p, r) for r, p in zip(curve.xs, curve.ys))


def mann_whitney_auc(examples) -> float:
    """Pairwise comparison AUC: P(member score > non-member) + 0.5 P(tie)."""
    members, others = _split_scores(examples)
    diff = members[:, None] - others[None, :]
    return float(((diff > 0).sum() + 0.5 * (diff == 0).sum()) / diff.size)


def random_guess_f(num_members: int, num_others: int) -> float:
    """F score of a coin-flip attacker: precision M/(M+N), recall 1/2."""
    if num_members < 1 or num_others < 0:
        raise ValueError("need at least one member")
    precision = num_members / (num_members + num_others)
    return f_score(precision, 0.5)


def write_curve_csv(path, curve: Curve) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["threshold", "x", "y"])
        for t, x, y in zip(curve.thresholds, curve.xs, curve.ys):
            writer.writerow([f"{t:.9g}", f"{x:.9g}", f"{y:.9g}"])
