"""First-order stable spline (TC) kernel and its Gaussian-prior bookkeeping.

The impulse response g = (g_1, ..., g_m) is modelled as a zero-mean Gaussian
vector with covariance lambda * K_beta, where

    K_beta[i, j] = beta ** max(i, j),   1 <= i, j <= m,  0 < beta < 1.

beta controls the exponential decay of the prior variances (var g_i =
lambda * beta**i) and the off-diagonal coupling; lambda is an overall scale.
"""

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

__all__ = [
    "BETA_MIN",
    "BETA_MAX",
    "FactorizationError",
    "Hyperparameters",
    "build_tc_kernel",
    "kernel_logdet",
    "kernel_quadform_inv",
    "spd_cholesky",
]

# Hyperparameter searches treat beta as living in the open interval (0, 1);
# the closed endpoints give a singular (or zero) kernel.
BETA_MIN = 1e-4
BETA_MAX = 1.0 - 1e-4

# Diagonal jitter applied once, relative to the mean diagonal, when a
# Cholesky factorization fails.
_JITTER_REL = 1e-10


class FactorizationError(np.linalg.LinAlgError):
    """A matrix that should be symmetric positive definite failed to factor."""


@dataclass(frozen=True)
class Hyperparameters:
    """Prior scale ``lam``, kernel decay ``beta``, noise variance ``sigma2``."""

    lam: float
    beta: float
    sigma2: float

    def __post_init__(self):
        if not self.lam > 0.0:
            raise ValueError(f"lam must be positive, got {self.lam}")
        if not 0.0 < self.beta < 1.0:
            raise ValueError(f"beta must lie in (0, 1), got {self.beta}")
        if not self.sigma2 > 0.0:
            raise ValueError(f"sigma2 must be positive, got {self.sigma2}")

    def as_array(self) -> np.ndarray:
        return np.array([self.lam, self.beta, self.sigma2])


def build_tc_kernel(beta: float, m: int) -> np.ndarray:
    """Return the m x m TC kernel matrix with entries beta**max(i, j).

    Indices are 1-based in the formula, so the top-left entry is beta**1.
    """
    if not 0.0 < beta < 1.0:
        raise ValueError(f"beta must lie in (0, 1), got {beta}")
    if m < 1:
        raise ValueError(f"m must be a positive integer, got {m}")
    idx = np.arange(1, m + 1)
    return beta ** np.maximum.outer(idx, idx).astype(float)


def spd_cholesky(mat: np.ndarray, context: str = "") -> np.ndarray:
    """Lower Cholesky factor of a symmetric positive-definite matrix.

    On failure a diagonal jitter of 1e-10 * trace/n is added and the
    factorization retried once; a second failure raises FactorizationError.
    """
    try:
        return np.linalg.cholesky(mat)
    except np.linalg.LinAlgError:
        n = mat.shape[0]
        jitter = _JITTER_REL * float(np.trace(mat)) / n
        try:
            return np.linalg.cholesky(mat + jitter * np.eye(n))
        except np.linalg.LinAlgError as exc:
            detail = f" ({context})" if context else ""
            raise FactorizationError(
                f"matrix of order {n} is numerically indefinite{detail}"
            ) from exc


def _kernel_context(K: np.ndarray) -> str:
    # K[0, 0] equals beta for a TC kernel, which makes failures diagnosable.
    return f"TC kernel, beta={K[0, 0]:.6g}, m={K.shape[0]}"


def kernel_logdet(K: np.ndarray) -> float:
    """log det K via Cholesky."""
    L = spd_cholesky(K, context=_kernel_context(K))
    return float(2.0 * np.sum(np.log(np.diag(L))))


def kernel_quadform_inv(K: np.ndarray, g: np.ndarray) -> float:
    """Quadratic form g^T K^{-1} g via one triangular solve."""
    g = np.asarray(g, dtype=float)
    if g.shape != (K.shape[0],):
        raise ValueError(f"g has shape {g.shape}, expected ({K.shape[0]},)")
    L = spd_cholesky(K, context=_kernel_context(K))
    x = solve_triangular(L, g, lower=True)
    return float(x @ x)


def solve_spd(mat: np.ndarray, rhs: np.ndarray, context: str = "") -> np.ndarray:
    """Solve mat @ x = rhs for SPD mat through its Cholesky factor."""
    L = spd_cholesky(mat, context=context)
    return cho_solve((L, True), rhs)


def tc_prior_logdet(eta: Hyperparameters, m: int) -> float:
    """log det (lam * K_beta) without forming the scaled matrix."""
    K = build_tc_kernel(eta.beta, m)
    return m * math.log(eta.lam) + kernel_logdet(K)
