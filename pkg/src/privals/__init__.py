"""Differentially private low-rank matrix completion via alternating least squares."""

from .accounting import (
    BudgetError,
    RdpLedger,
    dpals_rho_sq,
    dpals_rho_sq_split,
    gramian_rho_sq,
    power_iteration_rho_sq,
    preprocessing_rho_sq,
    rdp_to_dp,
    sigma_for_epsilon_closed_form,
    solve_sigma_for_budget,
)
from .data import (
    HoldoutSplit,
    MeanEstimateError,
    PreprocessParams,
    PreprocessReport,
    RatingsDataset,
    generate_skewed_dataset,
    generate_synthetic,
    ingest_csv,
    preprocess,
    split_by_users,
    split_random,
    uniform_sample_per_user,
)
from .evaluation import EvalReport, recall_at_k, rmse, top_k_items
from .factors import FactorPair
from .linalg import (
    DegenerateFactorError,
    clip_entries,
    clip_vector,
    orthonormalize_columns,
    project_psd,
    psd_pseudo_solve,
    sample_gaussian_vector,
    sample_symmetric_gaussian,
)
from .rng import RngStream
from .solver import (
    Hyper,
    NoiseParams,
    a_item,
    a_user,
    fold_in_user,
    noisy_gramian_term,
    solve_user_embedding,
    train_als,
    train_dpals,
)
from .spectral import (
    InitFailure,
    PowerIterConfig,
    incoherence_check,
    noisy_power_iteration,
    noisy_subspace_init,
    random_orthonormal_init,
)
from .harness import ExperimentConfig, RunReport, run_experiment, skew_report, sweep

__version__ = "0.1.0"
