"""Renyi-DP ledger for Gaussian mechanisms.

Every mechanism in the pipeline has an RDP curve of the form
eps(alpha) = alpha * rho_sq, so composition is additive in rho_sq and the
conversion to (epsilon, delta)-DP has the closed form
eps = 2 * sqrt(ln(1/delta)) * rho + rho^2, attained at the optimal Renyi
order alpha = 1 + sqrt(ln(1/delta)) / rho.
"""

from __future__ import annotations

import math
from dataclasses import dataclass


class BudgetError(ValueError):
    """The requested privacy budget cannot be met."""


def _check_positive_sigma(sigma: float, name: str = "sigma") -> None:
    if sigma <= 0:
        raise ValueError(f"infinite privacy loss: {name} must be positive")


def dpals_rho_sq(k: int, steps: int, sigma: float) -> float:
    """RDP coefficient of the alternating training loop: k*T / (2 sigma^2)."""
    if k < 1 or steps < 1:
        raise ValueError("k and steps must be at least 1")
    _check_positive_sigma(sigma)
    return k * steps / (2.0 * sigma**2)


def dpals_rho_sq_split(k: int, steps: int, sigma_gram: float, sigma_vec: float) -> float:
    """Training charge when the Gramian and right-hand-side noise scales differ.

    Charged conservatively at the smaller of the two scales; equal scales
    recover the single-sigma coefficient exactly.
    """
    _check_positive_sigma(sigma_gram, "sigma_gram")
    _check_positive_sigma(sigma_vec, "sigma_vec")
    return dpals_rho_sq(k, steps, min(sigma_gram, sigma_vec))


def preprocessing_rho_sq(k: int, sigma_p: float) -> float:
    """Charge of the preprocessing pipeline: (k + 1) / sigma_p^2.

    Covers two per-item count releases (l2 sensitivity sqrt(k) each) plus the
    two-part global-mean release.
    """
    if k < 1:
        raise ValueError("k must be at least 1")
    _check_positive_sigma(sigma_p, "sigma_p")
    return (k + 1) / sigma_p**2


def gramian_rho_sq(steps: int, sigma_gram: float) -> float:
    """Charge of releasing the shared noisy Gramian penalty once per step."""
    if steps < 0:
        raise ValueError("steps must be nonnegative")
    if steps == 0:
        return 0.0
    _check_positive_sigma(sigma_gram, "sigma_gram")
    return steps / (2.0 * sigma_gram**2)


def power_iteration_rho_sq(
    steps: int, s: int, gamma_m: float, nu: float, m: int, sigma: float
) -> float:
    """Charge of the noisy power iteration: T s^3 gamma_m^4 nu^2 / (2 m sigma^2)."""
    if steps < 1 or s < 1 or m < 1:
        raise ValueError("steps, s, and m must be at least 1")
    if gamma_m < 0 or nu < 0:
        raise ValueError("gamma_m and nu must be nonnegative")
    _check_positive_sigma(sigma, "sigma_init")
    return steps * s**3 * gamma_m**4 * nu**2 / (2.0 * m * sigma**2)


def rdp_to_dp(total_rho_sq: float, delta: float) -> float:
    """Convert a composed rho^2 to the optimal (epsilon, delta) guarantee."""
    if total_rho_sq < 0:
        raise ValueError("total_rho_sq must be nonnegative")
    if not 0.0 < delta < 1.0:
        raise ValueError("delta must lie in (0, 1)")
    if math.isinf(total_rho_sq):
        return math.inf
    rho = math.sqrt(total_rho_sq)
    log_inv_delta = math.log(1.0 / delta)
    return 2.0 * math.sqrt(log_inv_delta) * rho + total_rho_sq


def sigma_for_epsilon_closed_form(k: int, steps: int, epsilon: float, delta: float) -> float:
    """Sufficient (slightly conservative) noise scale for a target budget."""
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    if not 0.0 < delta < 1.0:
        raise ValueError("delta must lie in (0, 1)")
    if k < 1 or steps < 1:
        raise ValueError("k and steps must be at least 1")
    return math.sqrt(2.0 * k * steps * (epsilon + math.log(1.0 / delta))) / epsilon


def solve_sigma_for_budget(
    sigma_coeff: float,
    target_epsilon: float,
    delta: float,
    fixed_rho_sq: float = 0.0,
    rel_tol: float = 1e-6,
) -> float:
    """Smallest sigma with rdp_to_dp(fixed + coeff/sigma^2, delta) <= target.

    ``sigma_coeff`` collects every ledger entry that scales as c / sigma^2
    (e.g. k*T/2 for the training loop); ``fixed_rho_sq`` collects the entries
    whose noise scales are already pinned. Geometric bracketing followed by
    bisection, converging to |achieved - target| <= rel_tol * target.
    """
    if target_epsilon <= 0:
        raise ValueError("target_epsilon must be positive")
    if sigma_coeff <= 0:
        raise ValueError("sigma_coeff must be positive")
    if fixed_rho_sq < 0:
        raise ValueError("fixed_rho_sq must be nonnegative")
    if rdp_to_dp(fixed_rho_sq, delta) >= target_epsilon:
        raise BudgetError("budget exhausted by fixed mechanisms")

    def achieved(sigma: float) -> float:
        return rdp_to_dp(fixed_rho_sq + sigma_coeff / sigma**2, delta)

    hi = 1.0
    for _ in range(200):
        if achieved(hi) <= target_epsilon:
            break
        hi *= 2.0
    else:  # pragma: no cover - epsilon always reachable for finite fixed part
        raise BudgetError("budget exhausted by fixed mechanisms")
    lo = hi
    for _ in range(200):
        if achieved(lo / 2.0) > target_epsilon:
            break
        lo /= 2.0
    lo = lo / 2.0

    for _ in range(200):
        if target_epsilon - achieved(hi) <= rel_tol * target_epsilon:
            break
        mid = 0.5 * (lo + hi)
        if achieved(mid) <= target_epsilon:
            hi = mid
        else:
            lo = mid
    return hi


@dataclass(frozen=True)
class LedgerEntry:
    label: str
    rho_sq: float


class RdpLedger:
    """Append-only record of Gaussian-mechanism RDP coefficients.

    Totals never decrease; the composed guarantee is read off with
    ``epsilon()``. Run-scoped labels can be declared unique so a training run
    cannot charge itself twice.
    """

    def __init__(self, delta: float):
        if not 0.0 < delta < 1.0:
            raise ValueError("delta must lie in (0, 1)")
        self.delta = delta
        self._entries: list[LedgerEntry] = []

    @property
    def entries(self) -> tuple[LedgerEntry, ...]:
        return tuple(self._entries)

    @property
    def total_rho_sq(self) -> float:
        return sum(entry.rho_sq for entry in self._entries)

    def has_label(self, label: str) -> bool:
        return any(entry.label == label for entry in self._entries)

    def charge(self, label: str, rho_sq: float, unique: bool = False) -> LedgerEntry:
        if rho_sq < 0:
            raise ValueError("rho_sq must be nonnegative")
        if unique and self.has_label(label):
            raise ValueError(f"ledger already charged for {label!r}")
        entry = LedgerEntry(label=label, rho_sq=float(rho_sq))
        self._entries.append(entry)
        return entry

    def epsilon(self) -> float:
        return rdp_to_dp(self.total_rho_sq, self.delta)

    def summary(self) -> dict:
        return {
            "rho_sq_entries": [
                {"label": e.label, "rho_sq": e.rho_sq} for e in self._entries
            ],
            "total_rho_sq": self.total_rho_sq,
            "epsilon": self.epsilon(),
            "delta": self.delta,
        }
