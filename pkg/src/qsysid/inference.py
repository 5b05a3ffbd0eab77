"""Empirical-Bayes EM for the hyperparameters (lam, beta, sigma2).

The complete-data negative log-likelihood of the Gaussian model, up to
constants, is

    -2 L = ||z - U g||^2 / sigma2 + g' (lam K_beta)^{-1} g
           + N log sigma2 + log det(lam K_beta),

so the E-step only needs two statistics: f1 = E[||z - U g||^2 | y] and
S = E[g g' | y] (through f2(beta) = tr(K_beta^{-1} S)).  The M-step is then
closed form in lam and sigma2 once beta minimizes

    h(beta) = m log f2(beta) + log det K_beta,

which is scanned on a grid and polished by golden-section search.  Each EM
iteration re-estimates the E-step statistics with a fresh Gibbs chain,
warm-started from the previous iteration's final state.
"""

import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .kernel import (
    BETA_MAX,
    BETA_MIN,
    FactorizationError,
    Hyperparameters,
    build_tc_kernel,
    kernel_logdet,
    spd_cholesky,
)
from .sampler import (
    ChainStats,
    GibbsConfig,
    expected_g,
    expected_quadratic,
    gibbs_joint,
    gibbs_marginal,
    posterior_g_given_z,
    residual_quadratic_form,
)
from .signal import Dataset, Quantizer, regression_matrix

__all__ = [
    "EmConfig",
    "EStepStats",
    "EmIteration",
    "EmTrace",
    "e_step",
    "em_identify",
    "golden_section_minimize",
    "h_of_beta",
    "m_step",
    "minimize_h_beta",
    "neg2_q_value",
    "write_em_trace",
]

# Scale floors keep degenerate E-step statistics from producing a zero or
# negative variance.
_LAM_FLOOR = 1e-12
_SIGMA2_FLOOR = 1e-12

_GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


@dataclass(frozen=True)
class EmConfig:
    """EM stopping rule, chain lengths and the beta search grid."""

    rel_tol: float = 1e-3
    max_iters: int = 200
    gibbs_em: GibbsConfig = field(
        default_factory=lambda: GibbsConfig(n_samples=100, burn_in=100)
    )
    gibbs_final: GibbsConfig = field(
        default_factory=lambda: GibbsConfig(n_samples=500, burn_in=100)
    )
    beta_grid: int = 200
    beta_bounds: tuple[float, float] = (BETA_MIN, BETA_MAX)

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        lo, hi = self.beta_bounds
        if not (0.0 < lo <= hi < 1.0):
            raise ValueError(f"beta_bounds must satisfy 0 < lo <= hi < 1, got {self.beta_bounds}")


@dataclass
class EStepStats:
    """Sufficient statistics of one E-step: f1_hat and S = E[g g' | y]."""

    f1_hat: float
    S: np.ndarray


@dataclass(frozen=True)
class EmIteration:
    """One EM iteration: the starting eta and the statistics of its update."""

    eta: Hyperparameters
    f1_hat: float
    f2_new: float
    h_new: float
    h_grid_min: float
    neg2q_prev: float
    neg2q_new: float


@dataclass
class EmTrace:
    records: list[EmIteration]
    converged: bool = False
    n_iters: int = 0


def golden_section_minimize(fun, lo: float, hi: float, tol: float = 1e-7) -> float:
    """Golden-section search for a scalar minimum on [lo, hi]."""
    a, b = lo, hi
    c = b - _GOLDEN * (b - a)
    d = a + _GOLDEN * (b - a)
    fc, fd = fun(c), fun(d)
    while (b - a) > tol:
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - _GOLDEN * (b - a)
            fc = fun(c)
        else:
            a, c, fc = c, d, fd
            d = a + _GOLDEN * (b - a)
            fd = fun(d)
    return c if fc <= fd else d


def f2_of_beta(S: np.ndarray, beta: float) -> float:
    """tr(K_beta^{-1} S)."""
    m = S.shape[0]
    K = build_tc_kernel(beta, m)
    L = spd_cholesky(K, context=f"TC kernel, beta={beta:.6g}, m={m}")
    X = np.linalg.solve(L, S)
    Y = np.linalg.solve(L, X.T)
    return float(np.trace(Y))


def h_of_beta(S: np.ndarray, m: int, beta: float) -> float:
    """Profile objective h(beta) = m log f2(beta) + log det K_beta."""
    f2 = f2_of_beta(S, beta)
    if not f2 > 0.0 or not math.isfinite(f2):
        return math.inf
    return m * math.log(f2) + kernel_logdet(build_tc_kernel(beta, m))


def minimize_h_beta(
    S: np.ndarray,
    m: int,
    bounds: tuple[float, float] = (BETA_MIN, BETA_MAX),
    grid: int = 200,
    candidates: tuple[float, ...] = (),
) -> tuple[float, float, float]:
    """Minimize h(beta) over [bounds] by grid scan plus golden-section polish.

    Returns (beta, h(beta), min h over the grid).  Extra candidate betas are
    evaluated alongside the grid, so the result can never be worse than any
    of them.  Grid points whose kernel fails to factor are skipped with a
    warning.
    """
    lo, hi = bounds
    if lo == hi:
        val = h_of_beta(S, m, lo)
        return lo, val, val

    def safe_h(beta: float) -> float:
        try:
            return h_of_beta(S, m, beta)
        except FactorizationError:
            warnings.warn(
                f"skipping beta={beta:.6g}: kernel failed to factor", stacklevel=2
            )
            return math.inf

    betas = np.linspace(lo, hi, grid)
    values = np.array([safe_h(b) for b in betas])
    k = int(np.argmin(values))
    h_grid_min = float(values[k])
    best_beta, best_val = float(betas[k]), h_grid_min

    bracket_lo = betas[max(k - 1, 0)]
    bracket_hi = betas[min(k + 1, grid - 1)]
    if bracket_hi > bracket_lo:
        refined = golden_section_minimize(safe_h, float(bracket_lo), float(bracket_hi))
        refined_val = safe_h(refined)
        if refined_val < best_val:
            best_beta, best_val = float(refined), refined_val

    for cand in candidates:
        if cand is None:
            continue
        cand = float(min(max(cand, lo), hi))
        cand_val = safe_h(cand)
        if cand_val < best_val:
            best_beta, best_val = cand, cand_val
    return best_beta, best_val, h_grid_min


def neg2_q_value(eta: Hyperparameters, stats: EStepStats, N: int, m: int) -> float:
    """-2 Q(eta; stats): the EM surrogate at eta for fixed E-step statistics."""
    f2 = f2_of_beta(stats.S, eta.beta)
    return (
        stats.f1_hat / eta.sigma2
        + f2 / eta.lam
        + N * math.log(eta.sigma2)
        + m * math.log(eta.lam)
        + kernel_logdet(build_tc_kernel(eta.beta, m))
    )


def e_step(
    U: np.ndarray,
    q: Quantizer | None,
    y: np.ndarray,
    eta: Hyperparameters,
    cfg: GibbsConfig,
    rng: np.random.Generator,
    g0: np.ndarray | None = None,
    z0: np.ndarray | None = None,
    return_chain: bool = False,
):
    """Monte Carlo estimates of f1 = E[||z - Ug||^2 | y] and S = E[g g' | y].

    cfg.method selects the chain.  The joint chain reads both statistics off
    its (g, z) samples; the marginal chain reduces them to z moments through
    the Gaussian posterior of g given z.
    """
    U = np.asarray(U, dtype=float)
    post = posterior_g_given_z(U, eta)
    if cfg.method == "joint":
        chain = gibbs_joint(U, q, y, eta, cfg, rng, g0=g0)
        S = chain.egg
    else:
        chain = gibbs_marginal(U, q, y, eta, cfg, rng, z0=z0)
        S = post.P_g + post.H @ chain.ezz @ post.H.T
    S = 0.5 * (S + S.T)
    f1 = expected_quadratic(chain, residual_quadratic_form(U), post=post)
    stats = EStepStats(f1_hat=max(float(f1), 0.0), S=S)
    if return_chain:
        return stats, chain
    return stats


def m_step(
    stats: EStepStats,
    m: int,
    N: int,
    cfg: EmConfig,
    prev_beta: float | None = None,
) -> tuple[Hyperparameters, dict]:
    """Exact maximizer of Q given the E-step statistics.

    Returns the new hyperparameters and a diagnostics dict with the beta
    search values (f2, h, grid minimum) and whether a scale floor fired.
    """
    floored = False
    if not np.isfinite(stats.S).all() or float(np.trace(stats.S)) <= 0.0:
        # Degenerate statistics: keep beta, floor the scale.
        beta = prev_beta if prev_beta is not None else 0.5 * sum(cfg.beta_bounds)
        lam = _LAM_FLOOR
        sigma2 = max(stats.f1_hat / N, _SIGMA2_FLOOR)
        eta = Hyperparameters(lam=lam, beta=beta, sigma2=sigma2)
        info = {"f2_new": 0.0, "h_new": math.inf, "h_grid_min": math.inf, "floored": True}
        return eta, info
    cands = () if prev_beta is None else (prev_beta,)
    beta, h_new, h_grid_min = minimize_h_beta(
        stats.S, m, cfg.beta_bounds, cfg.beta_grid, candidates=cands
    )
    f2 = f2_of_beta(stats.S, beta)
    lam = f2 / m
    if lam < _LAM_FLOOR:
        lam, floored = _LAM_FLOOR, True
    sigma2 = stats.f1_hat / N
    if sigma2 < _SIGMA2_FLOOR:
        sigma2, floored = _SIGMA2_FLOOR, True
    eta = Hyperparameters(lam=lam, beta=beta, sigma2=sigma2)
    info = {"f2_new": f2, "h_new": h_new, "h_grid_min": h_grid_min, "floored": floored}
    return eta, info


def _initial_eta(u: np.ndarray, y: np.ndarray, m: int, cfg: EmConfig) -> Hyperparameters:
    # Empirical Bayes on the numeric levels, ignoring the quantizer; a crude
    # but cheap starting point.
    from .baselines import kb_standard

    try:
        res = kb_standard(u, y, m, beta_bounds=cfg.beta_bounds)
        return res.eta_hat
    except Exception as exc:  # noqa: BLE001  (any failure falls back)
        warnings.warn(f"initializer failed ({exc}); using defaults", stacklevel=2)
        sigma2 = max(float(np.var(np.asarray(y, dtype=float))) / 10.0, _SIGMA2_FLOOR)
        return Hyperparameters(lam=1.0, beta=0.8, sigma2=sigma2)


def em_identify(
    dataset: Dataset,
    q: Quantizer | None,
    cfg: EmConfig,
    method: str,
    rng: np.random.Generator,
    m: int | None = None,
    eta0: Hyperparameters | None = None,
) -> tuple[np.ndarray, Hyperparameters, EmTrace]:
    """Full empirical-Bayes pipeline: EM for eta, then a long chain for E[g|y].

    Iterates e_step / m_step until the squared relative change of eta falls
    below cfg.rel_tol or cfg.max_iters is hit (the trace records which).  The
    final estimate averages a fresh chain of cfg.gibbs_final sweeps at the
    fitted eta, warm-started from the last EM chain state.
    """
    if method not in ("joint", "marginal"):
        raise ValueError(f"method must be 'joint' or 'marginal', got {method!r}")
    u, y = dataset.u, dataset.y
    N = len(y)
    if m is None:
        if dataset.g_true is None:
            raise ValueError("m must be given when the dataset has no g_true")
        m = len(dataset.g_true)
    if m > N:
        warnings.warn(f"m={m} exceeds N={N}; the posterior is weakly informed", stacklevel=2)
    U = regression_matrix(u, N, m)
    eta = eta0 if eta0 is not None else _initial_eta(u, y, m, cfg)

    em_cfg = replace(cfg.gibbs_em, method=method)
    records: list[EmIteration] = []
    g_warm = z_warm = None
    converged = False
    n_iters = 0
    for _ in range(cfg.max_iters):
        stats, chain = e_step(
            U, q, y, eta, em_cfg, rng, g0=g_warm, z0=z_warm, return_chain=True
        )
        g_warm, z_warm = chain.last_g, chain.last_z
        eta_new, info = m_step(stats, m, N, cfg, prev_beta=eta.beta)
        neg2q_prev = neg2_q_value(eta, stats, N, m)
        neg2q_new = neg2_q_value(eta_new, stats, N, m)
        slack = 1e-9 + 1e-12 * abs(neg2q_prev)
        if not info["floored"] and neg2q_new > neg2q_prev + slack:
            raise RuntimeError(
                f"M-step failed to improve the EM surrogate: "
                f"{neg2q_new} > {neg2q_prev} at iteration {n_iters}"
            )
        records.append(
            EmIteration(
                eta=eta,
                f1_hat=stats.f1_hat,
                f2_new=info["f2_new"],
                h_new=info["h_new"],
                h_grid_min=info["h_grid_min"],
                neg2q_prev=neg2q_prev,
                neg2q_new=neg2q_new,
            )
        )
        n_iters += 1
        delta = eta_new.as_array() - eta.as_array()
        rel = float(delta @ delta) / float(eta.as_array() @ eta.as_array())
        eta = eta_new
        if rel <= cfg.rel_tol:
            converged = True
            break
    if not converged:
        warnings.warn(
            f"EM did not converge within {cfg.max_iters} iterations; "
            "returning the last iterate",
            stacklevel=2,
        )

    final_cfg = replace(cfg.gibbs_final, method=method)
    post = posterior_g_given_z(U, eta)
    if method == "joint":
        final = gibbs_joint(U, q, y, eta, final_cfg, rng, g0=g_warm)
    else:
        final = gibbs_marginal(U, q, y, eta, final_cfg, rng, z0=z_warm)
    g_hat = expected_g(final, post=post)
    return g_hat, eta, EmTrace(records=records, converged=converged, n_iters=n_iters)


def write_em_trace(trace: EmTrace, path) -> None:
    """Column-oriented text dump of the per-iteration EM records."""
    cols = [
        "iter",
        "lam",
        "beta",
        "sigma2",
        "f1_hat",
        "f2_new",
        "h_new",
        "h_grid_min",
        "neg2q_prev",
        "neg2q_new",
    ]
    with open(path, "w") as fh:
        fh.write(" ".join(cols) + "\n")
        for i, rec in enumerate(trace.records):
            row = [
                str(i),
                repr(rec.eta.lam),
                repr(rec.eta.beta),
                repr(rec.eta.sigma2),
                repr(rec.f1_hat),
                repr(rec.f2_new),
                repr(rec.h_new),
                repr(rec.h_grid_min),
                repr(rec.neg2q_prev),
                repr(rec.neg2q_new),
            ]
            fh.write(" ".join(row) + "\n")
        fh.write(f"# converged: {trace.converged} after {trace.n_iters} iterations\n")
