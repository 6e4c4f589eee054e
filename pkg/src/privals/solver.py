"""Alternating least squares: the exact solver, its private variant, and fold-in.

The item-side update of the private variant perturbs each item's normal
equations with calibrated Gaussian noise, projects onto the PSD cone, solves
by pseudoinverse, and orthonormalizes the stacked result. User-side solves
are privileged and noise free. Per-item noise comes from streams keyed by
(step, item), so results do not depend on execution order.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import accounting
from .data import RatingsDataset, _ranks_within_groups, uniform_sample_per_user
from .factors import FactorPair
from .linalg import (
    DegenerateFactorError,
    clip_rows,
    clip_vector,
    orthonormalize_columns,
    psd_project_pseudo_solve_batch,
    sample_symmetric_gaussian,
    symmetrize,
)
from .rng import RngStream
from .spectral import random_orthonormal_init

MAX_ITEM_RETRIES = 2


@dataclass(frozen=True)
class Hyper:
    """Loss hyper-parameters of the weighted objective.

    lam scales the l2 penalties, lam0 the global penalty on the full
    prediction matrix, mu and nu the count exponents of the item- and
    user-side penalty weights, and steps the number of alternations.
    """

    lam: float = 0.0
    lam0: float = 0.0
    mu: float = 0.0
    nu: float = 0.0
    steps: int = 1

    def __post_init__(self):
        if self.lam < 0 or self.lam0 < 0 or self.mu < 0 or self.nu < 0:
            raise ValueError("penalty parameters must be nonnegative")
        if self.steps < 0:
            raise ValueError("steps must be nonnegative")


@dataclass(frozen=True)
class NoiseParams:
    """Privacy-mechanism knobs of the private trainer."""

    gamma_u: float
    gamma_m: float
    k: int
    sigma_gram: float = 0.0
    sigma_vec: float = 0.0
    user_subsample: bool = False
    resample_each_step: bool = False

    def __post_init__(self):
        if self.gamma_u <= 0 or self.gamma_m <= 0:
            raise ValueError("clipping bounds must be positive")
        if self.k < 1:
            raise ValueError("k must be at least 1")
        if self.sigma_gram < 0 or self.sigma_vec < 0:
            raise ValueError("noise scales must be nonnegative")


@dataclass
class TrainTrace:
    """Per-step diagnostics of one training run."""

    steps: list = field(default_factory=list)
    retries: int = 0
    charged: dict = field(default_factory=dict)
    epsilon: float | None = None


def item_penalties(counts, lam: float, mu: float) -> np.ndarray:
    """Per-item penalty lam * c^mu / Z', with noisy counts clamped at 1.

    Z' is the mean of the clamped weights, so mu == 0 gives the uniform
    penalty lam.
    """
    counts = np.maximum(np.asarray(counts, dtype=np.float64), 1.0)
    weights = counts**mu
    z_norm = weights.mean()
    return lam * weights / z_norm


def user_penalties(counts, lam: float, nu: float):
    """Per-user penalty lam * c^nu / Z and the normalizer Z (exact counts)."""
    counts = np.asarray(counts, dtype=np.float64)
    weights = counts**nu
    z_norm = float(weights.mean())
    if z_norm == 0.0:
        z_norm = 1.0
    return lam * weights / z_norm, z_norm


def _gramians_and_rhs(groups, rows, values, n_groups, rank):
    """Sum of row outer products and value-weighted row sums per group.

    Returns (G, b) with G[g] = sum_i rows_i rows_i^T and
    b[g] = sum_i values_i rows_i over observations i in group g. Uses
    bincount accumulation for small ranks and segmented BLAS otherwise.
    """
    if rank <= 8:
        grams = np.empty((n_groups, rank, rank))
        for a in range(rank):
            for b_col in range(a, rank):
                acc = np.bincount(groups, weights=rows[:, a] * rows[:, b_col], minlength=n_groups)
                grams[:, a, b_col] = acc
                grams[:, b_col, a] = acc
        rhs = np.empty((n_groups, rank))
        for a in range(rank):
            rhs[:, a] = np.bincount(groups, weights=values * rows[:, a], minlength=n_groups)
        return grams, rhs

    order = np.argsort(groups, kind="stable")
    counts = np.bincount(groups, minlength=n_groups)
    indptr = np.concatenate(([0], np.cumsum(counts)))
    sorted_rows = rows[order]
    sorted_vals = values[order]
    grams = np.zeros((n_groups, rank, rank))
    rhs = np.zeros((n_groups, rank))
    for g in range(n_groups):
        lo, hi = indptr[g], indptr[g + 1]
        if lo == hi:
            continue
        block = sorted_rows[lo:hi]
        grams[g] = block.T @ block
        rhs[g] = sorted_vals[lo:hi] @ block
    return grams, rhs


def solve_user_embedding(
    item_factors,
    item_idx,
    ratings,
    hyper: Hyper,
    user_count: float,
    z_norm: float = 1.0,
    item_gram=None,
):
    """Exact ridge solve for one user's embedding against fixed item factors.

    Minimizes the per-user part of the weighted objective:
    sum (M_ij - u.V_j)^2 + lam0 ||u V^T||^2 + lam_eff ||u||^2 with
    lam_eff = lam * user_count^nu / z_norm.
    """
    item_factors = np.asarray(item_factors, dtype=np.float64)
    item_idx = np.asarray(item_idx, dtype=np.int64)
    ratings = np.asarray(ratings, dtype=np.float64)
    rank = item_factors.shape[1]
    lam_eff = hyper.lam * float(user_count) ** hyper.nu / z_norm
    selected = item_factors[item_idx]
    system = selected.T @ selected
    if hyper.lam0 > 0:
        if item_gram is None:
            item_gram = item_factors.T @ item_factors
        system = system + hyper.lam0 * item_gram
    system = symmetrize(system)
    system[np.diag_indices(rank)] += lam_eff
    rhs = ratings @ selected
    if lam_eff == 0.0 and hyper.lam0 == 0.0:
        eigvals = np.linalg.eigvalsh(system)
        if eigvals[0] <= rank * np.finfo(np.float64).eps * max(eigvals[-1], 0.0):
            raise ValueError("ill-posed user solve")
    try:
        return np.linalg.solve(system, rhs)
    except np.linalg.LinAlgError:
        raise ValueError("ill-posed user solve")


def a_user(
    item_factors,
    item_idx,
    ratings,
    hyper: Hyper,
    noise: NoiseParams,
    stream: RngStream,
    user_count: float | None = None,
    z_norm: float = 1.0,
    item_gram=None,
):
    """Privileged per-user solve followed by l2 clipping.

    With user_subsample on, first keeps a random 1/steps fraction of the
    user's ratings (a utility knob only; the solve is never released).
    """
    item_idx = np.asarray(item_idx, dtype=np.int64)
    ratings = np.asarray(ratings, dtype=np.float64)
    if noise.user_subsample and hyper.steps > 1 and item_idx.size > 0:
        quota = max(1, round(item_idx.size / hyper.steps))
        picks = stream.generator().choice(item_idx.size, size=quota, replace=False)
        picks.sort()
        item_idx = item_idx[picks]
        ratings = ratings[picks]
    if user_count is None:
        user_count = item_idx.size
    embedding = solve_user_embedding(
        item_factors, item_idx, ratings, hyper, user_count, z_norm, item_gram=item_gram
    )
    return clip_vector(embedding, noise.gamma_u)


def fold_in_user(
    item_factors,
    item_idx,
    ratings,
    hyper: Hyper,
    user_count: float | None = None,
    z_norm: float = 1.0,
    item_gram=None,
):
    """Test-time user embedding: the same privileged solve, never clipped."""
    item_idx = np.asarray(item_idx, dtype=np.int64)
    if user_count is None:
        user_count = item_idx.size
    return solve_user_embedding(
        item_factors,
        item_idx,
        np.asarray(ratings, dtype=np.float64),
        hyper,
        user_count,
        z_norm,
        item_gram=item_gram,
    )


def _solve_users_batch(ds: RatingsDataset, item_factors, hyper: Hyper, user_pen, clip_to=None):
    rank = item_factors.shape[1]
    grams, rhs = _gramians_and_rhs(
        ds.users, item_factors[ds.items], ds.values, ds.n, rank
    )
    if hyper.lam0 > 0:
        grams += hyper.lam0 * symmetrize(item_factors.T @ item_factors)
    grams[:, np.arange(rank), np.arange(rank)] += np.asarray(user_pen)[:, None]
    try:
        solution = np.linalg.solve(grams, rhs[:, :, None])[:, :, 0]
    except np.linalg.LinAlgError:
        raise ValueError("ill-posed user solve")
    if clip_to is not None:
        solution = clip_rows(solution, clip_to)
    return solution


def _subsample_users(ds: RatingsDataset, steps: int, seed: int) -> RatingsDataset:
    """Keep a 1/steps fraction of each user's ratings (line-level utility knob)."""
    if steps <= 1 or len(ds) == 0:
        return ds
    counts = ds.counts_by_user()
    quota = np.maximum(1, np.rint(counts / steps).astype(np.int64))
    keys = RngStream(seed, ("user_subsample",)).uniform(len(ds))
    order = np.lexsort((keys, ds.users))
    ranks = _ranks_within_groups(ds.users, order, ds.n)
    return ds.subset(np.flatnonzero(ranks < quota[ds.users]))


def _solve_items_batch(ds: RatingsDataset, user_factors, hyper: Hyper, item_pen):
    """Exact (noise-free) item update of the weighted objective."""
    rank = user_factors.shape[1]
    grams, rhs = _gramians_and_rhs(
        ds.items, user_factors[ds.users], ds.values, ds.m, rank
    )
    if hyper.lam0 > 0:
        grams += hyper.lam0 * symmetrize(user_factors.T @ user_factors)
    grams[:, np.arange(rank), np.arange(rank)] += np.asarray(item_pen)[:, None]
    try:
        return np.linalg.solve(grams, rhs[:, :, None])[:, :, 0]
    except np.linalg.LinAlgError:
        raise ValueError("ill-posed item solve")


def noisy_gramian_term(user_factors, lam0: float, gamma_u: float, sigma_gram: float, stream: RngStream):
    """Shared noisy penalty Gramian lam0 * U^T U + symmetric noise.

    Computed once per step and reused by every item solve; the noise scale
    lam0 * gamma_u^2 * sigma_gram covers one clipped user embedding's
    contribution.
    """
    user_factors = np.asarray(user_factors, dtype=np.float64)
    rank = user_factors.shape[1]
    if lam0 == 0.0:
        return np.zeros((rank, rank))
    exact = lam0 * symmetrize(user_factors.T @ user_factors)
    noise = sample_symmetric_gaussian(stream, rank, std=lam0 * gamma_u**2 * sigma_gram)
    return exact + noise


def a_item(
    user_factors,
    ds: RatingsDataset,
    hyper: Hyper,
    noise: NoiseParams,
    stream: RngStream,
    step: int,
    item_counts=None,
    gramian_term=None,
    active_items=None,
    stream_ids=None,
    attempt: int = 0,
):
    """Private item update: noisy per-item normal equations, PSD-projected
    pseudoinverse solves, then symmetric orthonormalization of the stack.

    Per-item noise streams are keyed by (step, attempt, item id) so the
    output is independent of item processing order. Items outside
    ``active_items`` receive zero rows and draw no noise.
    """
    user_factors = np.asarray(user_factors, dtype=np.float64)
    rank = user_factors.shape[1]
    counts = ds.counts_by_user()
    if counts.max(initial=0) > noise.k:
        raise ValueError("per-user observation cap exceeded; sample before a_item")
    norms = np.linalg.norm(user_factors, axis=1)
    if norms.size and norms.max() > noise.gamma_u * (1 + 1e-9):
        raise ValueError("user factors exceed the row clipping bound")
    if len(ds) and np.abs(ds.values).max() > noise.gamma_m * (1 + 1e-9):
        raise ValueError("rating entries exceed the clipping bound")

    if item_counts is None:
        if hyper.mu != 0.0:
            raise ValueError("item penalty weights require (noisy) item counts")
        item_pen = np.full(ds.m, hyper.lam)
    else:
        item_pen = item_penalties(item_counts, hyper.lam, hyper.mu)

    if active_items is None:
        active = np.arange(ds.m)
    else:
        active = np.asarray(active_items, dtype=np.int64)
        mask = np.zeros(ds.m, dtype=bool)
        mask[active] = True
        if len(ds) and not mask[ds.items].all():
            raise ValueError("dataset contains observations outside active_items")
    if stream_ids is None:
        stream_ids = np.arange(ds.m)

    grams, rhs = _gramians_and_rhs(
        ds.items, user_factors[ds.users], ds.values, ds.m, rank
    )
    if gramian_term is None and hyper.lam0 > 0:
        gramian_term = noisy_gramian_term(
            user_factors,
            hyper.lam0,
            noise.gamma_u,
            noise.sigma_gram,
            stream.child("a_item", step, attempt, "shared_gramian"),
        )
    if gramian_term is not None:
        grams[active] += gramian_term

    if noise.sigma_gram > 0 or noise.sigma_vec > 0:
        base = stream.child("a_item", step, attempt)
        gram_std = noise.gamma_u**2 * noise.sigma_gram
        vec_std = noise.gamma_u * noise.gamma_m * noise.sigma_vec
        for j in active:
            sid = int(stream_ids[j])
            grams[j] += sample_symmetric_gaussian(base.child("gram", sid), rank, gram_std)
            rhs[j] += base.child("rhs", sid).normal(rank, std=vec_std)

    diag = np.arange(rank)
    grams[active[:, None], diag, diag] += item_pen[active][:, None]

    stacked = np.zeros((ds.m, rank))
    stacked[active] = psd_project_pseudo_solve_batch(grams[active], rhs[active])
    return orthonormalize_columns(stacked)


def _training_rmse(ds: RatingsDataset, user_factors, item_factors) -> float:
    if len(ds) == 0:
        return 0.0
    preds = np.einsum("ij,ij->i", user_factors[ds.users], item_factors[ds.items])
    return float(np.sqrt(np.mean((ds.values - preds) ** 2)))


def objective_value(ds: RatingsDataset, user_factors, item_factors, hyper: Hyper, user_pen, item_pen) -> float:
    """Weighted training objective (residual + global + l2 penalty terms)."""
    preds = np.einsum("ij,ij->i", user_factors[ds.users], item_factors[ds.items])
    resid = ds.values - preds
    value = float(resid @ resid)
    if hyper.lam0 > 0:
        value += hyper.lam0 * float(
            np.sum((user_factors @ (item_factors.T @ item_factors)) * user_factors)
        )
    value += float(np.sum(np.asarray(user_pen) * np.einsum("ij,ij->i", user_factors, user_factors)))
    value += float(np.sum(np.asarray(item_pen) * np.einsum("ij,ij->i", item_factors, item_factors)))
    return value


def train_als(
    ds: RatingsDataset,
    rank: int,
    hyper: Hyper,
    seed: int,
    init_item_factors=None,
    item_counts=None,
):
    """Exact alternating least squares on the weighted objective.

    Runs ``hyper.steps`` alternations (user solve then item solve) and one
    final user refit against the last item factors. Returns the factor pair
    and a per-step trace with objective values and training RMSE.
    """
    if init_item_factors is None:
        init_item_factors = random_orthonormal_init(ds.m, rank, seed)
    item_factors = np.asarray(init_item_factors, dtype=np.float64)
    if item_factors.shape != (ds.m, rank):
        raise ValueError("init_item_factors has the wrong shape")
    trace = TrainTrace()
    if hyper.steps == 0:
        return FactorPair(np.zeros((ds.n, rank)), item_factors), trace

    if item_counts is None:
        item_counts = ds.counts_by_item()
    item_pen = item_penalties(item_counts, hyper.lam, hyper.mu)
    user_pen, _ = user_penalties(ds.counts_by_user(), hyper.lam, hyper.nu)

    user_factors = None
    for step in range(hyper.steps):
        user_factors = _solve_users_batch(ds, item_factors, hyper, user_pen)
        obj_users = objective_value(ds, user_factors, item_factors, hyper, user_pen, item_pen)
        item_factors = _solve_items_batch(ds, user_factors, hyper, item_pen)
        obj_items = objective_value(ds, user_factors, item_factors, hyper, user_pen, item_pen)
        trace.steps.append(
            {
                "step": step,
                "objective_after_users": obj_users,
                "objective_after_items": obj_items,
                "train_rmse": _training_rmse(ds, user_factors, item_factors),
            }
        )
    user_factors = _solve_users_batch(ds, item_factors, hyper, user_pen)
    trace.steps.append(
        {
            "step": hyper.steps,
            "objective_after_users": objective_value(
                ds, user_factors, item_factors, hyper, user_pen, item_pen
            ),
            "objective_after_items": None,
            "train_rmse": _training_rmse(ds, user_factors, item_factors),
        }
    )
    return FactorPair(user_factors, item_factors), trace


def train_dpals(
    ds: RatingsDataset,
    rank: int,
    hyper: Hyper,
    noise: NoiseParams,
    ledger,
    seed: int,
    init_item_factors=None,
    item_counts=None,
    active_items=None,
    resample_source=None,
    start_step: int = 0,
    stream_ids=None,
):
    """Private alternating training loop.

    Each step runs privileged clipped user solves followed by one private
    item update; the noise charge is appended to the ledger exactly once per
    run. ``resample_source`` switches on per-step resampling of the k-per-user
    cap (the default reuses the already-capped ``ds``). The returned user
    factors come from a final privileged, unclipped refit.
    """
    if init_item_factors is None:
        init_item_factors = random_orthonormal_init(ds.m, rank, seed)
    item_factors = np.asarray(init_item_factors, dtype=np.float64)
    if item_factors.shape != (ds.m, rank):
        raise ValueError("init_item_factors has the wrong shape")
    trace = TrainTrace()
    if hyper.steps <= start_step:
        return FactorPair(np.zeros((ds.n, rank)), item_factors), trace

    remaining = hyper.steps - start_step
    if ledger is not None:
        if noise.sigma_gram > 0 and noise.sigma_vec > 0:
            training_rho = accounting.dpals_rho_sq_split(
                noise.k, remaining, noise.sigma_gram, noise.sigma_vec
            )
        else:
            training_rho = math.inf
        label = "dpals_training" if start_step == 0 else f"dpals_training_resume_{start_step}"
        ledger.charge(label, training_rho, unique=True)
        trace.charged[label] = training_rho
        if hyper.lam0 > 0:
            penalty_rho = (
                accounting.gramian_rho_sq(remaining, noise.sigma_gram)
                if noise.sigma_gram > 0
                else math.inf
            )
            pen_label = "gramian_penalty" if start_step == 0 else f"gramian_penalty_resume_{start_step}"
            ledger.charge(pen_label, penalty_rho, unique=True)
            trace.charged[pen_label] = penalty_rho

    root = RngStream(seed, ("dpals",))
    if item_counts is not None:
        item_pen_counts = item_counts
    elif hyper.mu != 0.0:
        raise ValueError("item penalty weights require (noisy) item counts")
    else:
        item_pen_counts = None

    user_factors = None
    for step in range(start_step, hyper.steps):
        if noise.resample_each_step:
            source = resample_source if resample_source is not None else ds
            step_ds = uniform_sample_per_user(
                source, noise.k, root.child("resample", step).derived_seed()
            )
        else:
            step_ds = ds
        user_pen, _ = user_penalties(step_ds.counts_by_user(), hyper.lam, hyper.nu)
        sweep_ds = step_ds
        if noise.user_subsample:
            sweep_ds = _subsample_users(
                step_ds, hyper.steps, root.child("user_subsample", step).derived_seed()
            )
            user_pen, _ = user_penalties(sweep_ds.counts_by_user(), hyper.lam, hyper.nu)
        user_factors = _solve_users_batch(
            sweep_ds, item_factors, hyper, user_pen, clip_to=noise.gamma_u
        )
        shared_gram = None
        if hyper.lam0 > 0:
            shared_gram = noisy_gramian_term(
                user_factors,
                hyper.lam0,
                noise.gamma_u,
                noise.sigma_gram,
                root.child("shared_gramian", step),
            )
        last_error = None
        for attempt in range(MAX_ITEM_RETRIES + 1):
            try:
                item_factors = a_item(
                    user_factors,
                    step_ds,
                    hyper,
                    noise,
                    root,
                    step,
                    item_counts=item_pen_counts,
                    gramian_term=shared_gram,
                    active_items=active_items,
                    stream_ids=stream_ids,
                    attempt=attempt,
                )
                last_error = None
                break
            except DegenerateFactorError as exc:
                last_error = exc
                trace.retries += 1
        if last_error is not None:
            raise RuntimeError(
                f"item update degenerate after {MAX_ITEM_RETRIES + 1} attempts at step {step}"
            ) from last_error
        trace.steps.append(
            {
                "step": step,
                "train_rmse": _training_rmse(step_ds, user_factors, item_factors),
            }
        )

    final_pen, _ = user_penalties(ds.counts_by_user(), hyper.lam, hyper.nu)
    user_factors = _solve_users_batch(ds, item_factors, hyper, final_pen)
    trace.steps.append(
        {
            "step": hyper.steps,
            "train_rmse": _training_rmse(ds, user_factors, item_factors),
        }
    )
    if ledger is not None:
        trace.epsilon = ledger.epsilon()
    return FactorPair(user_factors, item_factors), trace


def save_checkpoint(path, factors: FactorPair, hyper: Hyper, noise: NoiseParams | None, master_seed: int, next_step: int, item_counts=None, active_items=None, ledger_summary=None):
    """Binary container restoring a bit-identical training continuation."""
    meta = {
        "hyper": {
            "lam": hyper.lam,
            "lam0": hyper.lam0,
            "mu": hyper.mu,
            "nu": hyper.nu,
            "steps": hyper.steps,
        },
        "noise": None
        if noise is None
        else {
            "gamma_u": noise.gamma_u,
            "gamma_m": noise.gamma_m,
            "k": noise.k,
            "sigma_gram": noise.sigma_gram,
            "sigma_vec": noise.sigma_vec,
            "user_subsample": noise.user_subsample,
            "resample_each_step": noise.resample_each_step,
        },
        "master_seed": int(master_seed),
        "next_step": int(next_step),
        "n": factors.n_users,
        "m": factors.n_items,
        "rank": factors.rank,
        "ledger_summary": ledger_summary,
    }
    arrays = {
        "user_factors": factors.user_factors,
        "item_factors": factors.item_factors,
        "meta_json": np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8),
    }
    if item_counts is not None:
        arrays["item_counts"] = np.asarray(item_counts, dtype=np.float64)
    if active_items is not None:
        arrays["active_items"] = np.asarray(active_items, dtype=np.int64)
    np.savez(path, **arrays)


@dataclass(frozen=True)
class Checkpoint:
    factors: FactorPair
    hyper: Hyper
    noise: NoiseParams | None
    master_seed: int
    next_step: int
    item_counts: np.ndarray | None
    active_items: np.ndarray | None
    ledger_summary: dict | None


def load_checkpoint(path) -> Checkpoint:
    with np.load(path) as payload:
        meta = json.loads(bytes(payload["meta_json"]).decode())
        noise = None
        if meta["noise"] is not None:
            noise = NoiseParams(**meta["noise"])
        return Checkpoint(
            factors=FactorPair(payload["user_factors"], payload["item_factors"]),
            hyper=Hyper(**meta["hyper"]),
            noise=noise,
            master_seed=meta["master_seed"],
            next_step=meta["next_step"],
            item_counts=payload["item_counts"] if "item_counts" in payload else None,
            active_items=payload["active_items"] if "active_items" in payload else None,
            ledger_summary=meta["ledger_summary"],
        )
