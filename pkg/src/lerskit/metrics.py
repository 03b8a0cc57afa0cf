"""Ranking / classification metrics and the cross-task retain ratio."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def auc(scores, labels) -> float:
    """Probability that a random positive outscores a random negative,
    ties counted 1/2. Rank-sum formulation, O(m log m)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = int(np.sum(labels == 1))
    neg = labels.size - pos
    if pos == 0 or neg == 0:
        raise ValueError("auc undefined: need at least one positive and one negative")
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(scores.size, dtype=np.float64)
    ranks[order] = np.arange(1, scores.size + 1)
    # average ranks across tied scores
    sorted_scores = scores[order]
    i = 0
    while i < scores.size:
        j = i
        while j + 1 < scores.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        if j > i:
            ranks[order[i:j + 1]] = 0.5 * (i + 1 + j + 1)
        i = j + 1
    rank_sum = ranks[labels == 1].sum()
    return float((rank_sum - pos * (pos + 1) / 2.0) / (pos * neg))


def log_loss(probs, labels, eps: float = 1e-7) -> float:
    p = np.clip(np.asarray(probs, dtype=np.float64), eps, 1.0 - eps)
    y = np.asarray(labels, dtype=np.float64)
    return float(np.mean(-y * np.log(p) - (1.0 - y) * np.log(1.0 - p)))


def ndcg_at_k(ranked, relevant, k: int) -> float:
    """Binary-relevance NDCG with 1/log2(rank+1) discount; 0 when the
    relevant set is empty."""
    if k < 1:
        raise ValueError("k must be >= 1")
    relevant = set(relevant)
    if not relevant:
        return 0.0
    dcg = 0.0
    for j, item in enumerate(ranked[:k], start=1):
        if item in relevant:
            dcg += 1.0 / np.log2(j + 1)
    ideal_slots = min(len(relevant), k)
    idcg = sum(1.0 / np.log2(j + 1) for j in range(1, ideal_slots + 1))
    return float(dcg / idcg)


def recall_at_k(ranked, relevant, k: int) -> float:
    if k < 1:
        raise ValueError("k must be >= 1")
    relevant = set(relevant)
    if not relevant:
        return 0.0
    hits = sum(1 for item in ranked[:k] if item in relevant)
    return float(hits / len(relevant))


def topk_recommend(scores, train_items, k: int) -> list[int]:
    """Top-k item ids by score with the user's training items masked out;
    ties broken by the lower item id. Returns all unmasked items, ranked,
    when fewer than k remain."""
    scores = np.asarray(scores, dtype=np.float64).copy()
    if not np.all(np.isfinite(scores)):
        raise ValueError("topk_recommend requires finite scores")
    train_items = np.asarray(list(train_items), dtype=np.int64)
    if train_items.size:
        scores[train_items] = -np.inf
    # stable sort on -score keeps ascending item-id order within ties
    order = np.argsort(-scores, kind="mergesort")
    out = [int(i) for i in order if scores[i] != -np.inf]
    return out[:k]


def retain_ratio(compressed_metric: float, original_metric: float) -> float:
    if original_metric <= 0:
        raise ValueError("retain ratio undefined for non-positive original metric")
    return compressed_metric / original_metric


def overall_retain_ratio(per_dataset_ratios) -> float:
    """Cross-dataset figure: arithmetic mean of the per-dataset ratios."""
    ratios = list(per_dataset_ratios)
    if not ratios:
        raise ValueError("need at least one per-dataset ratio")
    return float(np.mean(ratios))


def evaluate_topk(score_rows, train_lists, test_lists, k: int = 20):
    """Macro-averaged NDCG@k / Recall@k over users with non-empty test sets.

    `score_rows(users)` maps an id array to a (len(users), n_items) score
    matrix; train/test lists give per-user item ids.
    """
    users = [u for u in range(len(test_lists)) if len(test_lists[u]) > 0]
    if not users:
        raise ValueError("no users with test interactions")
    ndcgs, recalls = [], []
    chunk = 256
    for lo in range(0, len(users), chunk):
        batch = users[lo:lo + chunk]
        scores = score_rows(np.asarray(batch, dtype=np.int64))
        for row, u in enumerate(batch):
            ranked = topk_recommend(scores[row], train_lists[u], k)
            rel = test_lists[u]
            ndcgs.append(ndcg_at_k(ranked, rel, k))
            recalls.append(recall_at_k(ranked, rel, k))
    return float(np.mean(ndcgs)), float(np.mean(recalls))


@dataclass
class MetricReport:
    task: str
    metrics: dict[str, float] = field(default_factory=dict)
    param_count: int = 0
    base_param_count: int = 0
    sparsity: float = 0.0
    flags: list[str] = field(default_factory=list)

    def validate(self) -> None:
        for name, value in self.metrics.items():
            if name.lower() in ("auc", "ndcg@20", "recall@20") and not (0.0 <= value <= 1.0):
                raise ValueError(f"{name}={value} outside [0, 1]")
