"""Reference estimators the Gibbs-based method is benchmarked against.

* ``kb_standard`` fits the kernel-based Gaussian model directly to the numeric
  levels (or to the latent z, which gives the oracle variant): sigma2 from
  least-squares residuals, (lam, beta) from the closed-form marginal
  likelihood of y ~ N(0, lam U K U' + sigma2 I), then the posterior mean.
* ``ml_gs`` is maximum likelihood over (g, sigma2) with the quantizer in the
  model but no prior on g, fitted by EM; given g the latent z decouples into
  scalar truncated normals, so the E-step is analytic (a sampled variant is
  kept behind a flag).
* ``map_gs`` keeps the Gaussian prior but returns the posterior mode instead
  of the mean, by EM over g with (lam, beta, sigma2) plugged in from outside.
"""

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

from .inference import EmConfig, golden_section_minimize
from .kernel import (
    BETA_MAX,
    BETA_MIN,
    FactorizationError,
    Hyperparameters,
    build_tc_kernel,
    spd_cholesky,
)
from .sampler import posterior_g_given_z, truncnorm_moments, _draw_std_vec
from .signal import Quantizer, regression_matrix

__all__ = [
    "EstimatorResult",
    "gaussian_log_evidence",
    "kb_standard",
    "ml_gs",
    "map_gs",
]

_SIGMA2_FLOOR = 1e-12


@dataclass
class EstimatorResult:
    g_hat: np.ndarray
    eta_hat: Hyperparameters | None
    iterations: int
    converged: bool


def _ls_fit(U: np.ndarray, y: np.ndarray) -> np.ndarray:
    g, _, rank, _ = np.linalg.lstsq(U, y, rcond=None)
    if rank < U.shape[1]:
        # Rank-deficient normal equations: fall back to a small ridge.
        G = U.T @ U
        ridge = 1e-10 * float(np.trace(G)) / G.shape[0]
        g = np.linalg.solve(G + ridge * np.eye(G.shape[0]), U.T @ y)
    return g


def _residual_sigma2(U: np.ndarray, y: np.ndarray) -> float:
    N, m = U.shape
    resid = y - U @ _ls_fit(U, y)
    dof = N - m if N > m else N
    return max(float(resid @ resid) / dof, _SIGMA2_FLOOR)


def gaussian_log_evidence(
    lam: float,
    beta: float,
    sigma2: float,
    G: np.ndarray,
    b: np.ndarray,
    yty: float,
    N: int,
) -> float:
    """log N(y; 0, lam U K_beta U' + sigma2 I) from m-dimensional factors.

    G = U'U, b = U'y and yty = y'y are precomputed once; each evaluation then
    costs one m x m Cholesky through the identities
    det(sigma2 I + lam U K U') = sigma2^N det(C) and
    y' Sigma^{-1} y = (yty - (lam/sigma2) t' C^{-1} t) / sigma2,
    with C = I + (lam/sigma2) L'GL, K = LL', t = L'b.
    """
    m = G.shape[0]
    K = build_tc_kernel(beta, m)
    Lk = spd_cholesky(K, context=f"TC kernel, beta={beta:.6g}, m={m}")
    F = Lk.T @ G @ Lk
    C = np.eye(m) + (lam / sigma2) * F
    C = 0.5 * (C + C.T)
    Lc = spd_cholesky(C, context="evidence inner matrix")
    logdet = N * math.log(sigma2) + 2.0 * float(np.sum(np.log(np.diag(Lc))))
    t = Lk.T @ b
    w = solve_triangular(Lc, t, lower=True)
    quad = (yty - (lam / sigma2) * float(w @ w)) / sigma2
    return -0.5 * (N * math.log(2.0 * math.pi) + logdet + quad)


def kb_standard(
    u: np.ndarray,
    y_numeric: np.ndarray,
    m: int,
    beta_bounds: tuple[float, float] = (BETA_MIN, BETA_MAX),
    lam_grid: int = 30,
    beta_grid: int = 30,
) -> EstimatorResult:
    """Kernel-based estimate that treats the numeric levels as Gaussian data.

    Passing the latent z instead of y gives the quantization-free oracle
    variant.  (lam, beta) maximize the closed-form evidence on a log-spaced
    lam grid times a beta grid, each polished by golden-section search.
    """
    u = np.asarray(u, dtype=float)
    y = np.asarray(y_numeric, dtype=float)
    N = len(y)
    U = regression_matrix(u, N, m)
    G = U.T @ U
    b = U.T @ y
    yty = float(y @ y)
    sigma2 = _residual_sigma2(U, y)

    def evidence(lam: float, beta: float) -> float:
        try:
            return gaussian_log_evidence(lam, beta, sigma2, G, b, yty, N)
        except FactorizationError:
            return -math.inf

    lams = np.logspace(-4.0, 4.0, lam_grid)
    betas = np.linspace(beta_bounds[0], beta_bounds[1], beta_grid)
    values = np.array([[evidence(l, bb) for bb in betas] for l in lams])
    i, j = np.unravel_index(int(np.argmax(values)), values.shape)
    best = (float(lams[i]), float(betas[j]), float(values[i, j]))

    # Golden-section polish, beta first at the best lam, then log-lam.
    b_lo = float(betas[max(j - 1, 0)])
    b_hi = float(betas[min(j + 1, beta_grid - 1)])
    if b_hi > b_lo:
        beta_ref = golden_section_minimize(lambda bb: -evidence(best[0], bb), b_lo, b_hi)
        val = evidence(best[0], beta_ref)
        if val > best[2]:
            best = (best[0], float(beta_ref), val)
    l_lo = math.log(lams[max(i - 1, 0)])
    l_hi = math.log(lams[min(i + 1, lam_grid - 1)])
    if l_hi > l_lo:
        loglam_ref = golden_section_minimize(
            lambda ll: -evidence(math.exp(ll), best[1]), l_lo, l_hi
        )
        val = evidence(math.exp(loglam_ref), best[1])
        if val > best[2]:
            best = (float(math.exp(loglam_ref)), best[1], val)

    eta = Hyperparameters(lam=best[0], beta=best[1], sigma2=sigma2)
    post = posterior_g_given_z(U, eta)
    return EstimatorResult(g_hat=post.H @ y, eta_hat=eta, iterations=1, converged=True)


def _estep_moments(
    mu: np.ndarray,
    sigma2: float,
    cells,
    rng: np.random.Generator | None,
    n_draws: int | None,
) -> tuple[np.ndarray, np.ndarray]:
    """Mean and variance of each z_t | y_t, g: analytic, or Monte Carlo when
    n_draws is given (the chain degenerates to independent draws here)."""
    lo, hi = cells
    if n_draws is None:
        return truncnorm_moments(mu, sigma2, lo, hi)
    if rng is None:
        raise ValueError("rng is required for the sampled E-step")
    s = math.sqrt(sigma2)
    a = (lo - mu) / s
    bnd = (hi - mu) / s
    acc = np.zeros_like(mu)
    acc2 = np.zeros_like(mu)
    for _ in range(n_draws):
        x = mu + s * _draw_std_vec(a, bnd, rng)
        acc += x
        acc2 += x * x
    mean = acc / n_draws
    var = np.maximum(acc2 / n_draws - mean * mean, 0.0)
    return mean, var


def ml_gs(
    u: np.ndarray,
    y: np.ndarray,
    q: Quantizer | None,
    m: int,
    cfg: EmConfig,
    rng: np.random.Generator | None = None,
    sample_estep: bool = False,
) -> EstimatorResult:
    """Maximum likelihood over (g, sigma2) with the quantizer in the loop.

    EM with latent z; no prior on g, so the M-step for g is plain least
    squares against E[z|y].  With no quantizer this reduces to ordinary least
    squares in a single iteration.
    """
    u = np.asarray(u, dtype=float)
    y = np.asarray(y, dtype=float)
    N = len(y)
    U = regression_matrix(u, N, m)
    if not U.any():
        raise ValueError("the regression matrix is identically zero")
    G = U.T @ U
    # rank-deficient U is rescued by the jitter retry inside the factorization
    Lg = spd_cholesky(G, context="ML normal equations")

    def solve_G(rhs: np.ndarray) -> np.ndarray:
        x = solve_triangular(Lg, rhs, lower=True)
        return solve_triangular(Lg.T, x, lower=False)

    g = _ls_fit(U, y)
    sigma2 = _residual_sigma2(U, y)
    cells = q.intervals_for(y) if q is not None else None
    n_draws = cfg.gibbs_em.n_samples if sample_estep else None

    converged = False
    iters = 0
    for _ in range(cfg.max_iters):
        mu = U @ g
        if q is None:
            ez, vz = y, np.zeros(N)
        else:
            ez, vz = _estep_moments(mu, sigma2, cells, rng, n_draws)
        g_new = solve_G(U.T @ ez)
        resid = ez - U @ g_new
        sigma2_new = max((float(np.sum(vz)) + float(resid @ resid)) / N, _SIGMA2_FLOOR)
        iters += 1
        d_old = np.concatenate([g, [sigma2]])
        d_new = np.concatenate([g_new, [sigma2_new]])
        rel = float((d_new - d_old) @ (d_new - d_old)) / float(d_old @ d_old)
        g, sigma2 = g_new, sigma2_new
        if rel <= cfg.rel_tol:
            converged = True
            break
    return EstimatorResult(g_hat=g, eta_hat=None, iterations=iters, converged=converged)


def map_gs(
    u: np.ndarray,
    y: np.ndarray,
    q: Quantizer | None,
    m: int,
    eta_plugin: Hyperparameters,
    cfg: EmConfig,
    rng: np.random.Generator | None = None,
    sample_estep: bool = False,
) -> EstimatorResult:
    """Posterior-mode estimate of g with plugged-in hyperparameters.

    EM over g only: the E-step is the same scalar truncated-normal moment
    computation as in ml_gs (sigma2 fixed from eta_plugin), and the M-step is
    the regularized normal-equations solve g = H E[z|y].
    """
    u = np.asarray(u, dtype=float)
    y = np.asarray(y, dtype=float)
    N = len(y)
    U = regression_matrix(u, N, m)
    post = posterior_g_given_z(U, eta_plugin)
    sigma2 = eta_plugin.sigma2
    cells = q.intervals_for(y) if q is not None else None
    n_draws = cfg.gibbs_em.n_samples if sample_estep else None

    g = post.H @ y
    converged = False
    iters = 0
    for _ in range(cfg.max_iters):
        if q is None:
            ez = y
        else:
            ez, _ = _estep_moments(U @ g, sigma2, cells, rng, n_draws)
        g_new = post.H @ ez
        iters += 1
        diff = g_new - g
        denom = float(g @ g)
        rel = math.inf if denom == 0.0 else float(diff @ diff) / denom
        g = g_new
        if rel <= cfg.rel_tol:
            converged = True
            break
    return EstimatorResult(
        g_hat=g, eta_hat=eta_plugin, iterations=iters, converged=converged
    )
