"""Numerical primitives shared by the private computations.

Clipping, symmetric Gaussian noise, projection onto the PSD cone,
pseudoinverse solves, and symmetric orthonormalization. All functions are
pure; noise comes in through an explicit RngStream.
"""

from __future__ import annotations

import numpy as np

from .rng import RngStream

EPS = np.finfo(np.float64).eps


class DegenerateFactorError(ValueError):
    """A factor matrix lost column rank and cannot be orthonormalized."""


def _require_finite(arr: np.ndarray, message: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise ValueError(message)


def clip_vector(u: np.ndarray, radius: float) -> np.ndarray:
    """Project u onto the l2 ball of the given radius.

    Returns u unchanged when its norm is within the radius, otherwise the
    rescaled vector u * radius / ||u||.
    """
    if radius < 0:
        raise ValueError("clip radius must be nonnegative")
    u = np.asarray(u, dtype=np.float64)
    _require_finite(u, "non-finite vector")
    nrm = np.linalg.norm(u)
    if nrm <= radius:
        return u.copy()
    if nrm == 0.0:
        return np.zeros_like(u)
    return u * (radius / nrm)


def clip_rows(matrix: np.ndarray, radius: float) -> np.ndarray:
    """Row-wise l2 clipping; the batched form of clip_vector."""
    if radius < 0:
        raise ValueError("clip radius must be nonnegative")
    matrix = np.asarray(matrix, dtype=np.float64)
    _require_finite(matrix, "non-finite vector")
    norms = np.linalg.norm(matrix, axis=1)
    scales = np.ones_like(norms)
    over = norms > radius
    scales[over] = radius / norms[over]
    return matrix * scales[:, None]


def clip_entries(values, bound: float) -> np.ndarray:
    """Clamp every value into [-bound, bound]."""
    if bound < 0:
        raise ValueError("entry clip bound must be nonnegative")
    values = np.asarray(values, dtype=np.float64)
    _require_finite(values, "non-finite vector")
    return np.clip(values, -bound, bound)


def sample_gaussian_vector(stream: RngStream, dim: int, std: float) -> np.ndarray:
    if dim <= 0:
        raise ValueError("dimension must be positive")
    return stream.normal(dim, std=std)


def sample_symmetric_gaussian(stream: RngStream, order: int, std: float) -> np.ndarray:
    """Symmetric matrix whose upper triangle (incl. diagonal) is i.i.d. N(0, std^2).

    The lower triangle mirrors the upper one, so the result is symmetric by
    construction, bit for bit.
    """
    if order <= 0:
        raise ValueError("order must be positive")
    n_upper = order * (order + 1) // 2
    draws = stream.normal(n_upper, std=std)
    out = np.zeros((order, order), dtype=np.float64)
    iu = np.triu_indices(order)
    out[iu] = draws
    out[(iu[1], iu[0])] = draws
    return out


def symmetrize(a: np.ndarray) -> np.ndarray:
    return 0.5 * (a + a.T)


def project_psd(a: np.ndarray) -> np.ndarray:
    """Nearest-PSD projection: zero out negative eigenvalues of a symmetric matrix."""
    a = np.asarray(a, dtype=np.float64)
    _require_finite(a, "non-finite vector")
    try:
        w, q = np.linalg.eigh(symmetrize(a))
    except np.linalg.LinAlgError as exc:  # pragma: no cover - unreachable for finite input
        raise np.linalg.LinAlgError("eigensolver divergence") from exc
    w = np.maximum(w, 0.0)
    out = (q * w) @ q.T
    return symmetrize(out)


def psd_pseudo_solve(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve a x = b through the eigendecomposition pseudoinverse.

    Eigenvalues below order * eps * lambda_max count as zero, which gives
    pseudoinverse semantics on rank-deficient input.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _require_finite(a, "non-finite vector")
    _require_finite(b, "non-finite vector")
    try:
        w, q = np.linalg.eigh(symmetrize(a))
    except np.linalg.LinAlgError as exc:  # pragma: no cover
        raise np.linalg.LinAlgError("eigensolver divergence") from exc
    order = a.shape[0]
    cutoff = order * EPS * max(w.max(initial=0.0), 0.0)
    inv = np.where(w > cutoff, 1.0, 0.0)
    safe = np.where(w > cutoff, w, 1.0)
    inv = inv / safe
    return q @ (inv * (q.T @ b))


def psd_project_pseudo_solve_batch(mats: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Batched project_psd followed by psd_pseudo_solve.

    ``mats`` has shape (batch, r, r) and ``rhs`` shape (batch, r). Projection
    and pseudoinverse share the eigenbasis, so one eigh per matrix covers
    both: x = Q f(w) Q^T b with f(w) = 1/w for w above the rank cutoff of the
    projected spectrum and 0 otherwise.
    """
    mats = np.asarray(mats, dtype=np.float64)
    rhs = np.asarray(rhs, dtype=np.float64)
    w, q = np.linalg.eigh(0.5 * (mats + np.swapaxes(mats, -1, -2)))
    order = mats.shape[-1]
    w = np.maximum(w, 0.0)
    cutoff = order * EPS * w.max(axis=-1, keepdims=True)
    keep = w > cutoff
    inv = np.where(keep, 1.0, 0.0) / np.where(keep, w, 1.0)
    qtb = np.einsum("bij,bi->bj", q, rhs)
    return np.einsum("bij,bj->bi", q, inv * qtb)


def orthonormalize_columns(w_mat: np.ndarray) -> np.ndarray:
    """Symmetric orthonormalization W (W^T W)^{-1/2}.

    Unlike QR this is the unique closest orthonormal basis with the same
    column span, and it is scale invariant. Raises DegenerateFactorError when
    W is numerically rank deficient.
    """
    w_mat = np.asarray(w_mat, dtype=np.float64)
    _require_finite(w_mat, "non-finite vector")
    m, r = w_mat.shape
    out = w_mat
    for _ in range(2):
        gram = symmetrize(out.T @ out)
        try:
            w, q = np.linalg.eigh(gram)
        except np.linalg.LinAlgError as exc:  # pragma: no cover
            raise np.linalg.LinAlgError("eigensolver divergence") from exc
        if w[0] <= (r * EPS) ** 2 * w[-1] or w[-1] <= 0.0:
            raise DegenerateFactorError("degenerate factor matrix")
        inv_sqrt = (q / np.sqrt(w)) @ q.T
        out = out @ inv_sqrt
        resid = out.T @ out - np.eye(r)
        if np.linalg.norm(resid) <= 1e-10:
            break
    return out
