import numpy as np
import pytest

from privals.data import RatingsDataset


def make_dataset(n, m, triples):
    users = np.array([t[0] for t in triples], dtype=np.int64)
    items = np.array([t[1] for t in triples], dtype=np.int64)
    values = np.array([t[2] for t in triples], dtype=np.float64)
    return RatingsDataset(n, m, users, items, values)


def random_dataset(n, m, p, seed, value_std=1.0):
    """Dense-ish random observations with Gaussian values."""
    rng = np.random.default_rng(seed)
    mask = rng.random((n, m)) < p
    users, items = np.nonzero(mask)
    values = rng.normal(0.0, value_std, size=users.size)
    return RatingsDataset(n, m, users, items, values)


def well_posed_instance(seed, max_side=50, max_rank=4, p_range=(0.3, 1.0)):
    """Random low-rank-ish instance where every user and item has >= rank+1
    observations, so unregularized solves stay well posed."""
    rng = np.random.default_rng(seed)
    for attempt in range(200):
        n = int(rng.integers(12, max_side + 1))
        m = int(rng.integers(12, max_side + 1))
        rank = int(rng.integers(1, max_rank + 1))
        p = float(rng.uniform(*p_range))
        mask = rng.random((n, m)) < p
        counts_u = mask.sum(axis=1)
        counts_i = mask.sum(axis=0)
        if counts_u.min() <= rank or counts_i.min() <= rank:
            continue
        truth = rng.normal(size=(n, rank)) @ rng.normal(size=(rank, m))
        noise = 0.1 * rng.normal(size=(n, m))
        dense = truth + noise
        users, items = np.nonzero(mask)
        values = dense[users, items]
        return RatingsDataset(n, m, users, items, values), rank
    raise RuntimeError("could not build a well-posed instance")


@pytest.fixture
def tiny_ds():
    return make_dataset(
        3, 4, [(0, 0, 1.0), (0, 2, 2.0), (1, 1, -1.0), (1, 3, 0.5), (2, 0, 3.0)]
    )
