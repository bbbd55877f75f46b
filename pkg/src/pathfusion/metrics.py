"""Evaluation metrics: macro one-vs-rest classification scores, rank-based
AUC, concordance index, per-gene Pearson correlation, and mask overlap."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

SETTINGS = ("unimodal", "missing_modality", "multimodal")


@dataclass
class EvalReport:
    """Metric values for one checkpoint evaluated on one held-out fold."""

    task: str
    setting: str
    fold: int
    n_cases: int
    values: dict[str, float] = field(default_factory=dict)
    per_class: dict[str, list[float]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "task": self.task,
            "setting": self.setting,
            "fold": self.fold,
            "n_cases": self.n_cases,
            "values": self.values,
            "per_class": self.per_class,
        }


def _rank_auc(pos: np.ndarray, neg: np.ndarray) -> float:
    """Mann-Whitney AUC: P(pos > neg) with ties counting one half."""
    neg_sorted = np.sort(neg)
    below = np.searchsorted(neg_sorted, pos, side="left")
    above = np.searchsorted(neg_sorted, pos, side="right")
    wins = below.sum() + 0.5 * (above - below).sum()
    return float(wins / (len(pos) * len(neg)))


def classification_metrics(probs: np.ndarray, labels: np.ndarray) -> tuple[dict, dict]:
    """Accuracy plus macro-averaged one-vs-rest AUC/sensitivity/specificity/F1.

    Argmax ties go to the lowest class index. Classes absent from the labels
    are skipped in the macro averages; AUC additionally skips classes whose
    one-vs-rest split is degenerate (no negatives). One-vs-rest rates with a
    zero denominator count as 0.
    """
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if probs.ndim != 2 or len(labels) != probs.shape[0]:
        raise ValueError("need (batch, classes) probabilities and matching labels")
    if probs.shape[0] == 0:
        raise ValueError("empty batch")
    row_sums = probs.sum(axis=1)
    if np.any(np.abs(row_sums - 1.0) > 1e-4):
        raise ValueError("probability rows must sum to 1 within 1e-4")

    n_classes = probs.shape[1]
    preds = probs.argmax(axis=1)  # argmax returns the first (lowest) index on ties
    accuracy = float((preds == labels).mean())

    sens, spec, f1s, aucs = [], [], [], []
    per_class: dict[str, list[float]] = {"sensitivity": [], "specificity": [], "f1": [], "auc": []}
    for c in range(n_classes):
        is_pos = labels == c
        if not is_pos.any():
            for key in per_class:
                per_class[key].append(float("nan"))
            continue
        pred_pos = preds == c
        tp = float(np.sum(pred_pos & is_pos))
        fp = float(np.sum(pred_pos & ~is_pos))
        fn = float(np.sum(~pred_pos & is_pos))
        tn = float(np.sum(~pred_pos & ~is_pos))
        sensitivity = tp / (tp + fn) if tp + fn > 0 else 0.0
        specificity = tn / (tn + fp) if tn + fp > 0 else 0.0
        f1 = 2 * tp / (2 * tp + fp + fn) if 2 * tp + fp + fn > 0 else 0.0
        sens.append(sensitivity)
        spec.append(specificity)
        f1s.append(f1)
        per_class["sensitivity"].append(sensitivity)
        per_class["specificity"].append(specificity)
        per_class["f1"].append(f1)
        if is_pos.all():
            per_class["auc"].append(float("nan"))
        else:
            auc = _rank_auc(probs[is_pos, c], probs[~is_pos, c])
            aucs.append(auc)
            per_class["auc"].append(auc)

    values = {
        "accuracy": accuracy,
        "sensitivity": float(np.mean(sens)),
        "specificity": float(np.mean(spec)),
        "f1": float(np.mean(f1s)),
        "auc": float(np.mean(aucs)) if aucs else float("nan"),
    }
    return values, per_class


def concordance_index(risks: np.ndarray, times: np.ndarray, events: np.ndarray) -> float:
    """Fraction of comparable case pairs ordered correctly by risk.

    A pair (i, j) is comparable when t_i < t_j and case i is uncensored;
    risk ties count one half.
    """
    risks = np.asarray(risks, dtype=np.float64)
    times = np.asarray(times, dtype=np.float64)
    events = np.asarray(events, dtype=bool)
    if not len(risks) == len(times) == len(events):
        raise ValueError("risks, times, events must have equal lengths")
    comparable = (times[:, None] < times[None, :]) & events[:, None]
    n_pairs = comparable.sum()
    if n_pairs == 0:
        raise ValueError("no comparable pairs")
    higher = risks[:, None] > risks[None, :]
    tied = risks[:, None] == risks[None, :]
    concordant = (comparable & higher).sum() + 0.5 * (comparable & tied).sum()
    return float(concordant / n_pairs)


def gene_pcc(scores: np.ndarray, expression: np.ndarray) -> np.ndarray:
    """Pearson correlation of a per-case score against each gene's expression.

    Zero-variance genes (or a zero-variance score) yield 0.
    """
    scores = np.asarray(scores, dtype=np.float64)
    expression = np.asarray(expression, dtype=np.float64)
    if expression.ndim != 2 or scores.ndim != 1 or len(scores) != expression.shape[0]:
        raise ValueError("need (cases,) scores and (cases, genes) expression")
    if len(scores) < 3:
        raise ValueError("need at least 3 cases")
    s = scores - scores.mean()
    e = expression - expression.mean(axis=0)
    s_norm = np.sqrt((s * s).sum())
    e_norm = np.sqrt((e * e).sum(axis=0))
    denom = s_norm * e_norm
    with np.errstate(invalid="ignore", divide="ignore"):
        pcc = (s @ e) / denom
    pcc[~np.isfinite(pcc)] = 0.0
    if s_norm == 0:
        pcc[:] = 0.0
    return pcc


def cluster_overlap(assignment_mask: np.ndarray, truth_mask: np.ndarray) -> tuple[float, float]:
    """(Dice, recall) between a predicted boolean mask and the ground truth."""
    a = np.asarray(assignment_mask, dtype=bool)
    b = np.asarray(truth_mask, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    inter = float(np.sum(a & b))
    dice = 2 * inter / (a.sum() + b.sum()) if a.sum() + b.sum() > 0 else 0.0
    recall = inter / b.sum() if b.sum() > 0 else 0.0
    return float(dice), float(recall)


def aggregate_reports(reports: list[EvalReport]) -> dict:
    """Mean and standard deviation of each metric across fold reports."""
    if not reports:
        raise ValueError("no reports to aggregate")
    keys = sorted({k for r in reports for k in r.values})
    summary: dict = {
        "task": reports[0].task,
        "setting": reports[0].setting,
        "n_folds": len(reports),
        "metrics": {},
    }
    for key in keys:
        vals = np.array([r.values[key] for r in reports if key in r.values], dtype=np.float64)
        summary["metrics"][key] = {
            "mean": float(np.nanmean(vals)),
            "std": float(np.nanstd(vals)),
            "per_fold": [float(v) for v in vals],
        }
    return summary
