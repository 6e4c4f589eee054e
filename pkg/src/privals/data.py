"""Sparse ratings storage, synthetic generation, splits, and preprocessing.

Datasets are immutable triplet stores (user, item, value) with lazy inverted
indexes. Every transformation returns a new dataset; sampling operations are
pure functions of (inputs, seed).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .accounting import preprocessing_rho_sq
from .factors import FactorPair
from .linalg import clip_entries, orthonormalize_columns
from .rng import RngStream

logger = logging.getLogger(__name__)


class MeanEstimateError(RuntimeError):
    """The noisy denominator of the global-mean estimate came out nonpositive."""


class RatingsDataset:
    """Immutable sparse user-item observations with dual inverted indexes."""

    __slots__ = ("n", "m", "users", "items", "values", "_user_index", "_item_index")

    def __init__(self, n, m, users, items, values, validate: bool = True):
        self.n = int(n)
        self.m = int(m)
        users = np.ascontiguousarray(users, dtype=np.int64)
        items = np.ascontiguousarray(items, dtype=np.int64)
        values = np.ascontiguousarray(values, dtype=np.float64)
        if not (users.shape == items.shape == values.shape) or users.ndim != 1:
            raise ValueError("users, items, values must be 1-d arrays of equal length")
        if validate:
            if users.size and (users.min() < 0 or users.max() >= self.n):
                raise ValueError("user index out of range")
            if items.size and (items.min() < 0 or items.max() >= self.m):
                raise ValueError("item index out of range")
            if not np.all(np.isfinite(values)):
                raise ValueError("non-finite rating values")
            keys = users * self.m + items
            if np.unique(keys).size != keys.size:
                raise ValueError("duplicate (user, item) pairs")
        for arr in (users, items, values):
            arr.setflags(write=False)
        self.users = users
        self.items = items
        self.values = values
        self._user_index = None
        self._item_index = None

    # -- construction helpers -------------------------------------------------

    @classmethod
    def _trusted(cls, n, m, users, items, values) -> "RatingsDataset":
        return cls(n, m, users, items, values, validate=False)

    def subset(self, obs_index: np.ndarray) -> "RatingsDataset":
        return RatingsDataset._trusted(
            self.n, self.m, self.users[obs_index], self.items[obs_index], self.values[obs_index]
        )

    def with_values(self, values: np.ndarray) -> "RatingsDataset":
        return RatingsDataset._trusted(self.n, self.m, self.users, self.items, values)

    # -- index access ----------------------------------------------------------

    def __len__(self) -> int:
        return self.users.size

    @property
    def num_observations(self) -> int:
        return self.users.size

    def counts_by_user(self) -> np.ndarray:
        return np.bincount(self.users, minlength=self.n)

    def counts_by_item(self) -> np.ndarray:
        return np.bincount(self.items, minlength=self.m)

    def _index(self, by: np.ndarray, size: int):
        order = np.argsort(by, kind="stable")
        indptr = np.zeros(size + 1, dtype=np.int64)
        np.cumsum(np.bincount(by, minlength=size), out=indptr[1:])
        return indptr, order

    def user_index(self):
        """(indptr, order): order[indptr[i]:indptr[i+1]] are user i's observation ids."""
        if self._user_index is None:
            self._user_index = self._index(self.users, self.n)
        return self._user_index

    def item_index(self):
        if self._item_index is None:
            self._item_index = self._index(self.items, self.m)
        return self._item_index

    def user_observations(self, i: int):
        """(item ids, values) of user i."""
        indptr, order = self.user_index()
        sel = order[indptr[i] : indptr[i + 1]]
        return self.items[sel], self.values[sel]

    def item_observations(self, j: int):
        indptr, order = self.item_index()
        sel = order[indptr[j] : indptr[j + 1]]
        return self.users[sel], self.values[sel]

    def check_index_coherence(self) -> bool:
        return (
            int(self.counts_by_user().sum())
            == int(self.counts_by_item().sum())
            == self.num_observations
        )


@dataclass(frozen=True)
class IngestResult:
    dataset: RatingsDataset
    user_ids: np.ndarray
    item_ids: np.ndarray
    duplicates: int


@dataclass(frozen=True)
class HoldoutSplit:
    """Held-out users with their per-user query/target partition."""

    query: RatingsDataset
    target: RatingsDataset
    users: np.ndarray
    empty_target_users: int


@dataclass(frozen=True)
class PreprocessParams:
    gamma_m: float
    k: int | None
    sigma_p: float
    beta: float

    def __post_init__(self):
        if self.gamma_m < 0:
            raise ValueError("gamma_m must be nonnegative")
        if self.k is not None and self.k < 1:
            raise ValueError("k must be at least 1")
        if self.sigma_p < 0:
            raise ValueError("sigma_p must be nonnegative")
        if not 0.0 < self.beta <= 1.0:
            raise ValueError("beta must lie in (0, 1]")


@dataclass(frozen=True)
class PreprocessReport:
    noisy_counts: np.ndarray
    frequent_items: np.ndarray
    infrequent_items: np.ndarray
    global_mean: float
    sampled_dataset: RatingsDataset
    rho_sq_charged: float
    users_without_observations: int


def ingest_csv(path) -> IngestResult:
    """Load `user_id,item_id,rating[,timestamp]` CSV into a dense-indexed dataset.

    Ids are re-indexed in first-appearance order; duplicate (user, item) pairs
    keep the last value and are counted in the result.
    """
    import pandas as pd

    try:
        frame = pd.read_csv(path, header=0, dtype=str, skipinitialspace=True)
    except pd.errors.EmptyDataError:
        raise ValueError(f"empty ratings file: {path}")
    if frame.shape[1] < 3:
        raise ValueError(f"expected at least 3 columns (user,item,rating) in {path}")
    if len(frame) == 0:
        raise ValueError(f"no data rows in {path}")
    users_raw = frame.iloc[:, 0]
    items_raw = frame.iloc[:, 1]
    ratings = pd.to_numeric(frame.iloc[:, 2], errors="coerce")
    bad = ratings.isna() | users_raw.isna() | items_raw.isna()
    if bad.any():
        line = int(np.flatnonzero(bad.to_numpy())[0]) + 2  # 1-based, after header
        raise ValueError(f"malformed row at line {line} of {path}")

    user_codes, user_ids = pd.factorize(users_raw)
    item_codes, item_ids = pd.factorize(items_raw)
    users = user_codes.astype(np.int64)
    items = item_codes.astype(np.int64)
    values = ratings.to_numpy(dtype=np.float64)

    n, m = len(user_ids), len(item_ids)
    keys = users * m + items
    # last writer wins: reversed stable unique keeps the final occurrence
    _, last_pos = np.unique(keys[::-1], return_index=True)
    keep = np.sort(keys.size - 1 - last_pos)
    duplicates = keys.size - keep.size
    if duplicates:
        logger.warning("ingest: dropped %d duplicate (user, item) rows", duplicates)
    ds = RatingsDataset._trusted(n, m, users[keep], items[keep], values[keep])
    return IngestResult(
        dataset=ds,
        user_ids=np.asarray(user_ids),
        item_ids=np.asarray(item_ids),
        duplicates=duplicates,
    )


def generate_synthetic(n: int, m: int, rank: int, p: float, seed: int):
    """Low-rank ground truth with unit-variance entries, observed with probability p.

    The truth is U V^T for random orthonormal factors, with the user side
    rescaled so the standard deviation over all n*m entries is exactly 1.
    Returns (dataset, true_factors); true_factors reproduce the dense matrix.
    """
    if not 0.0 < p <= 1.0:
        raise ValueError("p must lie in (0, 1]")
    if rank > min(n, m):
        raise ValueError("rank exceeds min(n, m)")
    root = RngStream(seed, ("synthetic",))
    u_orth = orthonormalize_columns(root.child("user_factors").normal((n, rank)))
    v_orth = orthonormalize_columns(root.child("item_factors").normal((m, rank)))

    # For orthonormal factors sum(M^2) = rank exactly, so the full-matrix
    # standard deviation is available without materializing M.
    total = n * m
    mean = float(u_orth.sum(axis=0) @ v_orth.sum(axis=0)) / total
    var = rank / total - mean**2
    scale = 1.0 / math.sqrt(var)
    user_factors = scale * u_orth

    gen = root.child("observation_mask").generator()
    block = max(1, min(n, 8_388_608 // max(m, 1)))
    users_parts, items_parts, values_parts = [], [], []
    for start in range(0, n, block):
        stop = min(n, start + block)
        dense = user_factors[start:stop] @ v_orth.T
        if p >= 1.0:
            rows, cols = np.nonzero(np.ones(dense.shape, dtype=bool))
        else:
            rows, cols = np.nonzero(gen.random(dense.shape) < p)
        users_parts.append(rows + start)
        items_parts.append(cols)
        values_parts.append(dense[rows, cols])
    ds = RatingsDataset._trusted(
        n,
        m,
        np.concatenate(users_parts),
        np.concatenate(items_parts),
        np.concatenate(values_parts),
    )
    return ds, FactorPair(user_factors=user_factors, item_factors=v_orth)


def generate_skewed_dataset(
    n: int, m: int, per_user: int, exponent: float, seed: int
) -> RatingsDataset:
    """Unit ratings with power-law item popularity (diagnostics and skew tests).

    Each user rates ``per_user`` distinct items drawn without replacement
    with probability proportional to (item index + 1)^(-exponent).
    """
    if per_user > m:
        raise ValueError("per_user cannot exceed m")
    log_w = -exponent * np.log(np.arange(1, m + 1, dtype=np.float64))
    gen = RngStream(seed, ("skewed",)).generator()
    users_parts, items_parts = [], []
    block = max(1, 4_194_304 // max(m, 1))
    for start in range(0, n, block):
        stop = min(n, start + block)
        rows = stop - start
        gumbel = gen.gumbel(size=(rows, m))
        chosen = np.argpartition(-(log_w + gumbel), per_user - 1, axis=1)[:, :per_user]
        users_parts.append(np.repeat(np.arange(start, stop), per_user))
        items_parts.append(chosen.reshape(-1))
    users = np.concatenate(users_parts)
    items = np.concatenate(items_parts)
    return RatingsDataset._trusted(n, m, users, items, np.ones(users.size))


def split_random(ds: RatingsDataset, fractions, seed: int):
    """Independent seeded assignment of each observation to train/valid/test."""
    fractions = np.asarray(fractions, dtype=np.float64)
    if np.any(fractions < 0) or not math.isclose(fractions.sum(), 1.0, abs_tol=1e-9):
        raise ValueError("fractions must be nonnegative and sum to 1")
    draws = RngStream(seed, ("split_random",)).uniform(len(ds))
    edges = np.cumsum(fractions)
    part = np.searchsorted(edges, draws, side="right")
    part = np.minimum(part, fractions.size - 1)
    return tuple(ds.subset(np.flatnonzero(part == idx)) for idx in range(fractions.size))


def _ranks_within_groups(group_of_obs: np.ndarray, order: np.ndarray, n_groups: int):
    """Rank of each observation inside its group under the given sort order.

    ``order`` must sort observations with the group as primary key.
    """
    counts = np.bincount(group_of_obs, minlength=n_groups)
    starts = np.concatenate(([0], np.cumsum(counts)[:-1]))
    positions = np.arange(group_of_obs.size) - np.repeat(starts, counts)
    out = np.empty(group_of_obs.size, dtype=np.int64)
    out[order] = positions
    return out


def split_by_users(
    ds: RatingsDataset,
    holdout_valid: int,
    holdout_test: int,
    query_fraction: float,
    seed: int,
):
    """Hold out users entirely; split each held-out user's ratings into query/target.

    Returns (train, valid HoldoutSplit, test HoldoutSplit). Held-out users
    with fewer than two ratings go entirely into the query side and are
    counted in the split report.
    """
    if holdout_valid + holdout_test >= ds.n:
        raise ValueError("cannot hold out all users")
    if not 0.0 < query_fraction < 1.0:
        raise ValueError("query_fraction must lie in (0, 1)")
    root = RngStream(seed, ("split_by_users",))
    perm = root.child("user_permutation").generator().permutation(ds.n)
    valid_users = np.sort(perm[:holdout_valid])
    test_users = np.sort(perm[holdout_valid : holdout_valid + holdout_test])
    held = np.zeros(ds.n, dtype=bool)
    held[valid_users] = True
    held[test_users] = True
    train = ds.subset(np.flatnonzero(~held[ds.users]))

    def build_holdout(user_set: np.ndarray, tag: str) -> HoldoutSplit:
        member = np.zeros(ds.n, dtype=bool)
        member[user_set] = True
        sel = np.flatnonzero(member[ds.users])
        sub_users = ds.users[sel]
        keys = root.child("query_draw", tag).uniform(sel.size)
        order = np.lexsort((keys, sub_users))
        ranks = _ranks_within_groups(sub_users, order, ds.n)
        counts = np.bincount(sub_users, minlength=ds.n)
        n_query = np.rint(query_fraction * counts).astype(np.int64)
        n_query = np.clip(n_query, 1, np.maximum(counts - 1, 0))
        n_query[counts < 2] = counts[counts < 2]
        is_query = ranks < n_query[sub_users]
        empty_target = int(np.sum((counts[user_set] < 2) & (counts[user_set] > 0)))
        return HoldoutSplit(
            query=ds.subset(sel[is_query]),
            target=ds.subset(sel[~is_query]),
            users=user_set,
            empty_target_users=empty_target,
        )

    return train, build_holdout(valid_users, "valid"), build_holdout(test_users, "test")


def uniform_sample_per_user(ds: RatingsDataset, k: int | None, seed: int) -> RatingsDataset:
    """Keep min(k, |ratings|) observations per user, uniformly without replacement."""
    if k is None:
        return ds
    if k < 1:
        raise ValueError("k must be at least 1")
    if len(ds) == 0 or ds.counts_by_user().max(initial=0) <= k:
        return ds
    keys = RngStream(seed, ("uniform_sample",)).uniform(len(ds))
    order = np.lexsort((keys, ds.users))
    ranks = _ranks_within_groups(ds.users, order, ds.n)
    return ds.subset(np.flatnonzero(ranks < k))


def noisy_item_counts(ds: RatingsDataset, sigma_p: float, stream: RngStream) -> np.ndarray:
    """Per-item observation counts with independent N(0, sigma_p^2) noise.

    Noise is drawn from a per-item keyed stream so counts are reproducible
    under any parallel execution order.
    """
    counts = ds.counts_by_item().astype(np.float64)
    if sigma_p > 0:
        noise = np.array(
            [stream.child(int(j)).normal(1, std=sigma_p)[0] for j in range(ds.m)]
        )
        counts = counts + noise
    return counts


def partition_frequent(noisy_counts: np.ndarray, beta: float):
    """The ceil(beta*m) items with the largest noisy counts; ties to the smaller index."""
    if not 0.0 < beta <= 1.0:
        raise ValueError("beta must lie in (0, 1]")
    noisy_counts = np.asarray(noisy_counts, dtype=np.float64)
    m = noisy_counts.size
    n_frequent = math.ceil(beta * m)
    order = np.lexsort((np.arange(m), -noisy_counts))
    frequent = np.sort(order[:n_frequent])
    infrequent = np.sort(order[n_frequent:])
    return frequent, infrequent


def adaptive_sample_per_user(
    ds: RatingsDataset, frequent_items: np.ndarray, noisy_counts: np.ndarray, k: int | None
) -> RatingsDataset:
    """Per user, keep the frequent items with the smallest noisy counts.

    Deterministic given the counts: sort by (count, item index) and keep the
    first min(k, available) items of each user.
    """
    if k is not None and k < 1:
        raise ValueError("k must be at least 1")
    is_frequent = np.zeros(ds.m, dtype=bool)
    is_frequent[frequent_items] = True
    sel = np.flatnonzero(is_frequent[ds.items])
    kept = ds.subset(sel)
    if k is None:
        return kept
    order = np.lexsort((kept.items, np.asarray(noisy_counts)[kept.items], kept.users))
    ranks = _ranks_within_groups(kept.users, order, ds.n)
    return kept.subset(np.flatnonzero(ranks < k))


def noisy_global_mean(
    ds: RatingsDataset, gamma_m: float, k: int, sigma_p: float, stream: RngStream
) -> float:
    """Two-part private estimate of the global mean rating.

    Numerator noise std sqrt(k)*gamma_m*sigma_p, denominator noise std
    sqrt(k)*sigma_p; raises MeanEstimateError when the noisy denominator is
    nonpositive.
    """
    numerator = float(ds.values.sum())
    denominator = float(len(ds))
    if sigma_p > 0:
        root_k = math.sqrt(k)
        numerator += float(stream.child("numerator").normal(1, std=root_k * gamma_m * sigma_p)[0])
        denominator += float(stream.child("denominator").normal(1, std=root_k * sigma_p)[0])
    if denominator <= 0:
        raise MeanEstimateError("mean estimate degenerate")
    return numerator / denominator


def preprocess(ds: RatingsDataset, params: PreprocessParams, stream: RngStream) -> PreprocessReport:
    """Full preprocessing pipeline: clip, sample, count, partition, resample, center.

    Order: clip entries; uniform-sample k per user; noisy counts; frequent
    partition at beta; adaptive-sample k per user within the frequent items;
    recompute noisy counts on the final sample; subtract the noisy global
    mean and re-clamp to the entry bound. The composed privacy charge is
    (k + 1) / sigma_p^2.
    """
    clipped = ds.with_values(clip_entries(ds.values, params.gamma_m))
    uniform = uniform_sample_per_user(
        clipped, params.k, stream.child("uniform_sample").derived_seed()
    )
    first_counts = noisy_item_counts(uniform, params.sigma_p, stream.child("counts_first"))
    frequent, infrequent = partition_frequent(first_counts, params.beta)
    adaptive = adaptive_sample_per_user(clipped, frequent, first_counts, params.k)
    second_counts = noisy_item_counts(adaptive, params.sigma_p, stream.child("counts_second"))
    k_for_mean = params.k if params.k is not None else 0
    mean = noisy_global_mean(
        adaptive, params.gamma_m, k_for_mean, params.sigma_p, stream.child("global_mean")
    )
    centered = adaptive.with_values(clip_entries(adaptive.values - mean, params.gamma_m))
    if params.sigma_p > 0 and params.k is not None:
        rho_sq = preprocessing_rho_sq(params.k, params.sigma_p)
    else:
        # noiseless or uncapped runs make no private release
        rho_sq = math.inf
    users_empty = int(np.sum(centered.counts_by_user() == 0))
    return PreprocessReport(
        noisy_counts=second_counts,
        frequent_items=frequent,
        infrequent_items=infrequent,
        global_mean=mean,
        sampled_dataset=centered,
        rho_sq_charged=rho_sq,
        users_without_observations=users_empty,
    )


def gini_coefficient(counts: np.ndarray) -> float:
    """Gini index of a nonnegative count vector (0 = uniform, 1 = concentrated)."""
    counts = np.sort(np.asarray(counts, dtype=np.float64))
    total = counts.sum()
    if total <= 0:
        return 0.0
    size = counts.size
    ranks = np.arange(1, size + 1)
    return float(2.0 * (ranks * counts).sum() / (size * total) - (size + 1) / size)


def top_share(ds: RatingsDataset, fraction: float) -> float:
    """Share of observations held by the most-rated ceil(fraction*m) items."""
    counts = np.sort(ds.counts_by_item())[::-1]
    n_top = math.ceil(fraction * ds.m)
    total = counts.sum()
    if total == 0:
        return 0.0
    return float(counts[:n_top].sum() / total)
