"""Classification/segmentation/regression metrics and k-fold planning.

Conventions, chosen once and flagged rather than silently patched:
* a zero denominator (no predicted positives, no actual positives) yields
  metric 0 together with an ``*_undefined`` flag;
* AUC uses midranks, so label-independent scores give exactly 0.5;
* Dice of two empty masks is 1;
* multi-class AUC/AP are one-vs-rest macro averages, skipping (and
  flagging) classes absent from the evaluation set.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import ShapeError, UndefinedMetricError


@dataclass(frozen=True)
class ClassMetrics:
    """Binary (or one-vs-rest) confusion counts and their derived rates."""

    tp: int
    tn: int
    fp: int
    fn: int
    acc: float
    pre: float
    rec: float
    f1: float
    flags: tuple[str, ...] = ()


def classification_metrics(tp: int, tn: int, fp: int, fn: int) -> ClassMetrics:
    """Accuracy, precision, recall, F1 from confusion counts."""
    counts = (tp, tn, fp, fn)
    if any(c < 0 for c in counts):
        raise ValueError(f"negative confusion count in {counts}")
    total = sum(counts)
    if total == 0:
        raise ValueError("all-zero confusion matrix")
    flags = []
    acc = (tp + tn) / total
    if tp + fp == 0:
        pre = 0.0
        flags.append("precision_undefined")
    else:
        pre = tp / (tp + fp)
    if tp + fn == 0:
        rec = 0.0
        flags.append("recall_undefined")
    else:
        rec = tp / (tp + fn)
    if pre + rec == 0:
        f1 = 0.0
        flags.append("f1_undefined")
    else:
        f1 = 2 * pre * rec / (pre + rec)
    return ClassMetrics(tp, tn, fp, fn, acc, pre, rec, f1, tuple(flags))


def _midranks(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values), dtype=np.float64)
    sorted_vals = values[order]
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0  # average of 1-based ranks
        i = j + 1
    return ranks


def auc_ap(scores: Sequence[float], labels: Sequence[int]) -> tuple[float, float]:
    """Rank-statistic AUC (ties averaged) and step-integrated average precision."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape or s.ndim != 1:
        raise ShapeError(f"scores {s.shape} and labels {y.shape} must be equal 1-D")
    pos = y == 1
    n_pos = int(pos.sum())
    n_neg = int(len(y) - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC/AP need both classes present")

    ranks = _midranks(s)
    auc = (ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)

    # AP: walk score thresholds from high to low, ties as one block
    order = np.argsort(-s, kind="stable")
    sorted_scores = s[order]
    sorted_pos = pos[order].astype(np.float64)
    ap = 0.0
    tp = fp = 0.0
    prev_recall = 0.0
    i = 0
    n = len(y)
    while i < n:
        j = i
        while j + 1 < n and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        tp += sorted_pos[i : j + 1].sum()
        fp += (j - i + 1) - sorted_pos[i : j + 1].sum()
        recall = tp / n_pos
        precision = tp / (tp + fp)
        ap += (recall - prev_recall) * precision
        prev_recall = recall
        i = j + 1
    return float(auc), float(ap)


def auc_bruteforce(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Pairwise win/tie enumeration; quadratic, for checking the rank statistic."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    pos = s[y == 1]
    neg = s[y != 1]
    if len(pos) == 0 or len(neg) == 0:
        raise UndefinedMetricError("AUC needs both classes present")
    wins = ties = 0.0
    for p in pos:
        for q in neg:
            if p > q:
                wins += 1
            elif p == q:
                ties += 1
    return float((wins + 0.5 * ties) / (len(pos) * len(neg)))


def dice(pred_mask, gt_mask) -> float:
    """2|P∩G| / (|P|+|G|); two empty masks count as a perfect match."""
    p = np.asarray(pred_mask).astype(bool)
    g = np.asarray(gt_mask).astype(bool)
    if p.shape != g.shape:
        raise ShapeError(f"mask shapes differ: {p.shape} vs {g.shape}")
    sp, sg = int(p.sum()), int(g.sum())
    if sp + sg == 0:
        return 1.0
    return 2.0 * int((p & g).sum()) / (sp + sg)


def mae(preds: Sequence[float], targets: Sequence[float]) -> float:
    """Mean absolute error."""
    p = np.asarray(preds, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    if p.shape != t.shape:
        raise ShapeError(f"length mismatch: {p.shape} vs {t.shape}")
    if p.size == 0:
        raise ValueError("mae of empty inputs")
    return float(np.abs(p - t).mean())


@dataclass(frozen=True)
class Fold:
    train: tuple[int, ...]
    test: tuple[int, ...]


@dataclass(frozen=True)
class FoldPlan:
    k: int
    folds: tuple[Fold, ...]


def kfold_split(subject_count: int, k: int, seed: int) -> FoldPlan:
    """Seeded shuffle into k disjoint test folds whose sizes differ by <= 1."""
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    if subject_count < k:
        raise ValueError(f"cannot split {subject_count} subjects into {k} folds")
    perm = np.random.default_rng(seed).permutation(subject_count)
    base, rem = divmod(subject_count, k)
    folds, start = [], 0
    for i in range(k):
        size = base + (1 if i < rem else 0)
        test = np.sort(perm[start : start + size])
        train = np.sort(np.concatenate([perm[:start], perm[start + size :]]))
        folds.append(Fold(tuple(int(x) for x in train), tuple(int(x) for x in test)))
        start += size
    return FoldPlan(k, tuple(folds))


@dataclass
class MetricsReport:
    """Everything evaluate() produces; rates are in [0, 1], flags list the
    conventions that fired (zero denominators, missing classes)."""

    task: str
    n: int
    accuracy: float
    per_class: dict[int, ClassMetrics] = field(default_factory=dict)
    precision: float = 0.0
    recall: float = 0.0
    f1: float = 0.0
    auc: Optional[float] = None
    ap: Optional[float] = None
    dsc: Optional[float] = None
    mae: Optional[float] = None
    flags: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {
            "task": self.task,
            "n": self.n,
            "accuracy": self.accuracy,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "auc": self.auc,
            "ap": self.ap,
            "dsc": self.dsc,
            "mae": self.mae,
            "flags": list(self.flags),
            "per_class": {
                str(c): {
                    "tp": m.tp, "tn": m.tn, "fp": m.fp, "fn": m.fn,
                    "acc": m.acc, "pre": m.pre, "rec": m.rec, "f1": m.f1,
                    "flags": list(m.flags),
                }
                for c, m in self.per_class.items()
            },
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


def multiclass_report(
    labels: np.ndarray,
    preds: np.ndarray,
    scores: Optional[np.ndarray] = None,
    n_classes: Optional[int] = None,
) -> MetricsReport:
    """One-vs-rest confusion per class plus macro averages.

    ``scores`` is the (N, M) class-probability matrix; AUC/AP are skipped
    (and flagged) for classes without both positives and negatives.
    """
    y = np.asarray(labels)
    p = np.asarray(preds)
    if y.shape != p.shape:
        raise ShapeError(f"labels {y.shape} and predictions {p.shape} differ")
    if y.size == 0:
        raise ValueError("empty evaluation set")
    m = n_classes or int(max(y.max(), p.max())) + 1
    per_class: dict[int, ClassMetrics] = {}
    flags: list[str] = []
    aucs, aps = [], []
    for c in range(m):
        tp = int(((p == c) & (y == c)).sum())
        fp = int(((p == c) & (y != c)).sum())
        fn = int(((p != c) & (y == c)).sum())
        tn = int(((p != c) & (y != c)).sum())
        cm = classification_metrics(tp, tn, fp, fn)
        per_class[c] = cm
        flags.extend(f"class{c}_{fl}" for fl in cm.flags)
        if scores is not None:
            binary = (y == c).astype(int)
            if 0 < binary.sum() < len(binary):
                auc_c, ap_c = auc_ap(scores[:, c], binary)
                aucs.append(auc_c)
                aps.append(ap_c)
            else:
                flags.append(f"class{c}_auc_undefined")
    macro = lambda vals: float(np.mean(vals)) if vals else 0.0
    return MetricsReport(
        task="classification",
        n=int(y.size),
        accuracy=float((y == p).mean()),
        per_class=per_class,
        precision=macro([cm.pre for cm in per_class.values()]),
        recall=macro([cm.rec for cm in per_class.values()]),
        f1=macro([cm.f1 for cm in per_class.values()]),
        auc=macro(aucs) if scores is not None and aucs else None,
        ap=macro(aps) if scores is not None and aps else None,
        flags=tuple(flags),
    )
