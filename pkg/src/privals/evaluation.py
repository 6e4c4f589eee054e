"""Held-out evaluation: RMSE on entries and Recall@k for held-out users."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .data import HoldoutSplit, RatingsDataset
from .factors import FactorPair
from .solver import Hyper, fold_in_user


@dataclass(frozen=True)
class RecallReport:
    mean_recall: float
    users_scored: int
    users_skipped: int
    per_user: np.ndarray | None = None


@dataclass
class EvalReport:
    """Serializable evaluation summary with fixed field names."""

    rmse: float | None = None
    recall: dict = field(default_factory=dict)
    n_eval_entries: int = 0
    n_eval_users: int = 0

    def to_json(self) -> str:
        payload = {
            "rmse": self.rmse,
            "recall": {str(k): v for k, v in sorted(self.recall.items())},
            "k": sorted(self.recall),
            "n_eval_entries": self.n_eval_entries,
            "n_eval_users": self.n_eval_users,
        }
        return json.dumps(payload, sort_keys=True)


def rmse(
    factors: FactorPair,
    test_ds: RatingsDataset,
    offset: float = 0.0,
    frequent_items=None,
    fallback_user_means=None,
) -> float:
    """Root-mean-square error over exactly the test entries.

    Predictions are u.v + offset. When a frequent-item partition is given,
    entries on items outside it are predicted with the user's average
    observed training rating instead (``fallback_user_means``).
    """
    if len(test_ds) == 0:
        raise ValueError("empty test set")
    preds = factors.predict(test_ds.users, test_ds.items) + offset
    if frequent_items is not None:
        trained = np.zeros(test_ds.m, dtype=bool)
        trained[np.asarray(frequent_items, dtype=np.int64)] = True
        fallback_mask = ~trained[test_ds.items]
        if fallback_mask.any():
            if fallback_user_means is None:
                raise ValueError("fallback_user_means required for infrequent items")
            preds[fallback_mask] = np.asarray(fallback_user_means)[
                test_ds.users[fallback_mask]
            ]
    resid = preds - test_ds.values
    return float(np.sqrt(np.mean(resid**2)))


def user_mean_fallback(train_ds: RatingsDataset, global_mean: float) -> np.ndarray:
    """Per-user mean observed training rating; the global mean where empty."""
    counts = train_ds.counts_by_user()
    sums = np.bincount(train_ds.users, weights=train_ds.values, minlength=train_ds.n)
    out = np.full(train_ds.n, float(global_mean))
    nonzero = counts > 0
    out[nonzero] = sums[nonzero] / counts[nonzero]
    return out


def top_k_items(user_embedding, item_factors, k: int, excluded=None) -> np.ndarray:
    """Indices of the k highest-scoring items, ties to the smaller index.

    Excluded items are never returned; fewer than k candidates returns all.
    """
    if k < 1:
        raise ValueError("k must be at least 1")
    scores = np.asarray(item_factors) @ np.asarray(user_embedding)
    m = scores.size
    allowed = np.ones(m, dtype=bool)
    if excluded is not None:
        excluded = np.asarray(excluded, dtype=np.int64)
        allowed[excluded] = False
    candidates = np.flatnonzero(allowed)
    order = np.lexsort((candidates, -scores[candidates]))
    return candidates[order[:k]]


def recall_at_k(
    item_factors,
    holdout: HoldoutSplit,
    k: int,
    hyper: Hyper,
    z_norm: float = 1.0,
    value_offset: float = 0.0,
    keep_per_user: bool = False,
) -> RecallReport:
    """Mean fold-in recall over held-out users.

    Per user: fold in an embedding from the query ratings (centered by
    ``value_offset``), rank the non-query items, and score the hits against
    the target set with denominator min(k, |target|). Users with an empty
    target are skipped and counted.
    """
    item_factors = np.asarray(item_factors, dtype=np.float64)
    item_gram = item_factors.T @ item_factors
    recalls = []
    skipped = 0
    for user in holdout.users:
        query_items, query_values = holdout.query.user_observations(user)
        target_items, _ = holdout.target.user_observations(user)
        if target_items.size == 0:
            skipped += 1
            continue
        embedding = fold_in_user(
            item_factors,
            query_items,
            query_values - value_offset,
            hyper,
            z_norm=z_norm,
            item_gram=item_gram,
        )
        ranked = top_k_items(embedding, item_factors, k, excluded=query_items)
        hits = np.intersect1d(ranked, target_items, assume_unique=True).size
        recalls.append(hits / min(k, target_items.size))
    if not recalls:
        raise ValueError("no scorable held-out users")
    per_user = np.asarray(recalls) if keep_per_user else None
    return RecallReport(
        mean_recall=float(np.mean(recalls)),
        users_scored=len(recalls),
        users_skipped=skipped,
        per_user=per_user,
    )
