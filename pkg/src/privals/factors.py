"""Factor-pair container shared by the dataset, solver, and evaluation layers."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class FactorPair:
    """User factors (n x r) and item factors (m x r) of one model."""

    user_factors: np.ndarray
    item_factors: np.ndarray

    def __post_init__(self):
        u = np.asarray(self.user_factors, dtype=np.float64)
        v = np.asarray(self.item_factors, dtype=np.float64)
        if u.ndim != 2 or v.ndim != 2 or u.shape[1] != v.shape[1]:
            raise ValueError("factors must be 2-d with a shared rank")
        if not (np.all(np.isfinite(u)) and np.all(np.isfinite(v))):
            raise ValueError("non-finite factor entries")
        object.__setattr__(self, "user_factors", u)
        object.__setattr__(self, "item_factors", v)

    @property
    def rank(self) -> int:
        return self.user_factors.shape[1]

    @property
    def n_users(self) -> int:
        return self.user_factors.shape[0]

    @property
    def n_items(self) -> int:
        return self.item_factors.shape[0]

    def predict(self, users: np.ndarray, items: np.ndarray) -> np.ndarray:
        """Dot-product predictions for aligned (user, item) index arrays."""
        return np.einsum(
            "ij,ij->i", self.user_factors[users], self.item_factors[items]
        )

    def predict_dense(self) -> np.ndarray:
        return self.user_factors @ self.item_factors.T
