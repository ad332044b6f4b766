"""Decision and explainability metrics plus Pareto-front extraction.

The decision threshold is chosen on validation scores to maximize recall
subject to FPR <= target; recall is then reported on test at that fixed
threshold. Concept quality is macro mAP over concepts with at least one
positive. Classification rule throughout: positive iff score >= threshold.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import ConceptBottleneckModel, predict
from .synthgen import concept_targets, decision_labels, features_matrix


def threshold_at_fpr(scores, labels, fpr_target: float = 0.05) -> float:
    """Smallest threshold whose FPR stays within the target.

    Candidates are the distinct scores plus +inf, so the degenerate answer
    (flag nothing) is always available. Smaller thresholds admit more
    positives, so the returned one maximizes recall under the constraint.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    neg = np.sort(scores[labels == 0])
    if len(neg) == 0:
        raise ValueError("threshold_at_fpr needs at least one negative example")
    candidates = np.unique(scores)
    # count of negatives >= t, via the sorted negative scores
    fpr = (len(neg) - np.searchsorted(neg, candidates, side="left")) / len(neg)
    feasible = candidates[fpr <= fpr_target]
    if len(feasible) == 0:
        return float("inf")
    return float(feasible[0])


def recall_at_fpr(scores, labels, threshold: float):
    """(recall, realized FPR) at a fixed threshold; positive iff score >= t."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = scores[labels == 1]
    if len(pos) == 0:
        raise ValueError("recall_at_fpr needs at least one positive example")
    neg = scores[labels == 0]
    recall = float((pos >= threshold).mean())
    realized_fpr = float((neg >= threshold).mean()) if len(neg) else 0.0
    return recall, realized_fpr


def average_precision(scores, labels):
    """AP over descending-score ranks; ties keep their input order.

    Returns None when the label column has no positives.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape:
        raise ValueError(f"length mismatch: {scores.shape} vs {labels.shape}")
    order = np.argsort(-scores, kind="stable")
    ranked = labels[order]
    positives = int(ranked.sum())
    if positives == 0:
        return None
    hits = np.cumsum(ranked)
    ranks = np.arange(1, len(ranked) + 1)
    precision_at_hit = (hits / ranks)[ranked == 1]
    return float(precision_at_hit.mean())


def mean_average_precision(score_matrix, label_matrix):
    """(macro mAP, per-concept APs, excluded count).

    Concepts without positives are excluded from the mean (their AP slot is
    None). If every concept is excluded that is an error, not a silent 0.
    """
    score_matrix = np.asarray(score_matrix, dtype=np.float64)
    label_matrix = np.asarray(label_matrix)
    if score_matrix.shape != label_matrix.shape:
        raise ValueError(
            f"shape mismatch: {score_matrix.shape} vs {label_matrix.shape}"
        )
    aps = [
        average_precision(score_matrix[:, j], label_matrix[:, j])
        for j in range(score_matrix.shape[1])
    ]
    included = [ap for ap in aps if ap is not None]
    if not included:
        raise ValueError("every concept lacks positives; mAP undefined")
    return float(np.mean(included)), aps, len(aps) - len(included)


def pareto_front(points) -> list[bool]:
    """Weak-dominance front flags for (x, y) points, larger is better.

    A point is off the front iff some other point is >= in both coordinates
    and > in at least one; exact duplicates of a front point stay on it.
    """
    pts = [(float(a), float(b)) for a, b in points]
    if not pts:
        raise ValueError("pareto_front needs at least one point")
    order = sorted(range(len(pts)), key=lambda i: (-pts[i][0], -pts[i][1]))
    flags = [False] * len(pts)
    best_prev = -np.inf  # max y among points with strictly greater x
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and pts[order[j + 1]][0] == pts[order[i]][0]:
            j += 1
        group = order[i : j + 1]
        group_max = max(pts[g][1] for g in group)
        for g in group:
            flags[g] = pts[g][1] == group_max and pts[g][1] > best_prev
        best_prev = max(best_prev, group_max)
        i = j + 1
    return flags


@dataclass
class EvalReport:
    """Decision and concept metrics for one trained model."""

    fpr_target: float
    threshold: float
    recall_at_fpr: float
    realized_fpr: float
    mean_ap: float
    per_concept_ap: list = field(default_factory=list)
    concepts_excluded: int = 0
    pareto_member: bool | None = None


def evaluate_model(
    model: ConceptBottleneckModel,
    val_records,
    test_records,
    fpr_target: float = 0.05,
    fraud_class: int = 1,
) -> EvalReport:
    """Threshold on validation, then score the test split.

    The fraud score is the decision head's probability of the fraud class;
    concept metrics compare predicted concept probabilities against the
    golden concept vectors of the test rows.
    """
    val_scores = predict(model, features_matrix(val_records)).decision[:, fraud_class]
    threshold = threshold_at_fpr(val_scores, decision_labels(val_records), fpr_target)

    test_pred = predict(model, features_matrix(test_records))
    recall, realized = recall_at_fpr(
        test_pred.decision[:, fraud_class], decision_labels(test_records), threshold
    )

    y_e, mask = concept_targets(test_records, model.concept_count, "golden")
    if not mask.any():
        raise ValueError("test split has no golden concept labels to evaluate against")
    mean_ap, per_ap, excluded = mean_average_precision(
        test_pred.concepts[mask], y_e[mask]
    )
    return EvalReport(
        fpr_target=fpr_target,
        threshold=threshold,
        recall_at_fpr=recall,
        realized_fpr=realized,
        mean_ap=mean_ap,
        per_concept_ap=per_ap,
        concepts_excluded=excluded,
    )
