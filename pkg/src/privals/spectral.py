"""Item-factor initialization: random orthonormal and noisy power iteration.

The power iteration applies P^T (P w) as two sparse passes over the
observations, never forming the m x m Gram matrix, and adds isotropic
Gaussian noise after each multiply. Iterates that concentrate on few
coordinates fail the flatness gate and abort the procedure.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .accounting import power_iteration_rho_sq
from .linalg import orthonormalize_columns
from .rng import RngStream


class InitFailure(RuntimeError):
    """A power-iteration iterate failed the incoherence gate."""


@dataclass(frozen=True)
class PowerIterConfig:
    steps: int
    nu: float
    s: int
    gamma_m: float
    sigma: float
    seed: int

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be at least 1")
        if self.nu <= 0:
            raise ValueError("nu must be positive")
        if self.s < 1:
            raise ValueError("s must be at least 1")
        if self.gamma_m <= 0:
            raise ValueError("gamma_m must be positive")
        if self.sigma < 0:
            raise ValueError("sigma must be nonnegative")

    def rho_sq(self, m: int) -> float:
        if self.sigma == 0:
            return math.inf
        return power_iteration_rho_sq(
            self.steps, self.s, self.gamma_m, self.nu, m, self.sigma
        )


def random_orthonormal_init(m: int, rank: int, seed: int) -> np.ndarray:
    """Rotation-invariant random orthonormal m x rank matrix."""
    if rank > m:
        raise ValueError("rank exceeds m")
    gaussian = RngStream(seed, ("random_init",)).normal((m, rank))
    return orthonormalize_columns(gaussian)


def incoherence_check(w: np.ndarray, nu: float) -> bool:
    """True iff the unit vector is nu-flat: max|w_j| <= nu / sqrt(m)."""
    w = np.asarray(w, dtype=np.float64)
    return bool(np.abs(w).max() <= nu / math.sqrt(w.size))


def _gram_matvec(ds, w: np.ndarray) -> np.ndarray:
    """P^T (P w) via two sparse passes; O(observations) time and memory."""
    through_users = np.bincount(
        ds.users, weights=ds.values * w[ds.items], minlength=ds.n
    )
    return np.bincount(
        ds.items, weights=ds.values * through_users[ds.users], minlength=ds.m
    )


def _validate_input(ds, cfg: PowerIterConfig) -> None:
    if len(ds) and np.abs(ds.values).max() > cfg.gamma_m * (1 + 1e-9):
        raise ValueError("rating entries exceed the clipping bound")
    if ds.counts_by_user().max(initial=0) > cfg.s:
        raise ValueError("per-user observation cap exceeded; sample before init")


def noisy_power_iteration(ds, cfg: PowerIterConfig) -> np.ndarray:
    """Private estimate of the top right singular direction.

    Starts from a random unit vector; each of the ``cfg.steps`` rounds gates
    on incoherence, applies the sparse Gram multiply, perturbs with
    N(0, sigma^2 I), and renormalizes. Raises InitFailure when an iterate is
    not nu-flat.
    """
    _validate_input(ds, cfg)
    root = RngStream(cfg.seed, ("power_iteration",))
    w = root.child("start").unit_vector(ds.m)
    for t in range(1, cfg.steps + 1):
        if not incoherence_check(w, cfg.nu):
            raise InitFailure(f"iterate at round {t} is not {cfg.nu}-incoherent")
        z = _gram_matvec(ds, w)
        if cfg.sigma > 0:
            z = z + root.child("noise", t).normal(ds.m, std=cfg.sigma)
        nrm = np.linalg.norm(z)
        if nrm == 0.0:
            raise ValueError("zero-norm iterate in power iteration")
        w = z / nrm
    return w


def noisy_subspace_init(ds, rank: int, cfg: PowerIterConfig):
    """Block variant for rank > 1: orthogonal iteration with per-entry noise.

    Each column of the orthonormal iterate must pass the incoherence gate.
    Privacy is charged as ``rank`` independent rank-1 runs; returns
    (item_factors, rho_sq_charged).
    """
    if rank < 1:
        raise ValueError("rank must be at least 1")
    _validate_input(ds, cfg)
    root = RngStream(cfg.seed, ("subspace_iteration",))
    basis = orthonormalize_columns(root.child("start").normal((ds.m, rank)))
    for t in range(1, cfg.steps + 1):
        for col in range(rank):
            if not incoherence_check(basis[:, col], cfg.nu):
                raise InitFailure(
                    f"column {col} at round {t} is not {cfg.nu}-incoherent"
                )
        z = np.empty_like(basis)
        for col in range(rank):
            z[:, col] = _gram_matvec(ds, basis[:, col])
        if cfg.sigma > 0:
            z = z + root.child("noise", t).normal((ds.m, rank), std=cfg.sigma)
        basis = orthonormalize_columns(z)
    return basis, rank * cfg.rho_sq(ds.m)
