"""Truncated-normal sampling and Gibbs chains for quantized-output posteriors.

Given the linear model z = U g + e with Gaussian prior g ~ N(0, lam * K_beta)
and observations y_t = Q[z_t], the posterior over (g, z) is Gaussian restricted
to the box of quantizer cells selected by y.  Two chains explore it:

* ``gibbs_joint`` alternates z | g (independent scalar truncated normals) and
  g | z (one multivariate normal draw), producing joint (g, z) samples.
* ``gibbs_marginal`` integrates g out analytically and sweeps the truncated
  N-variate Gaussian z | y coordinate by coordinate, reading each conditional
  off the precision matrix of Sigma_z = lam * U K U^T + sigma2 * I.

Posterior functionals of both g and z reduce to expectations over z alone:
for f(g, z) = g'Ag + 2 z'Bg + z'Cz,

    E[f | y] = tr(A P_g) + E[ z' (H'AH + 2BH + C) z | y ],

where P_g and H are the covariance and mean map of g | z.  ``expected_quadratic``
evaluates this for either chain, and E[g | y] = H E[z | y].
"""

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve
from scipy.special import ndtr, ndtri

from .kernel import Hyperparameters, build_tc_kernel, spd_cholesky
from .signal import Quantizer

__all__ = [
    "ChainStats",
    "GibbsConfig",
    "PosteriorGaussian",
    "QuadraticForm",
    "TruncatedNormalSpec",
    "conditional_z_given_g",
    "expected_g",
    "expected_quadratic",
    "gibbs_joint",
    "gibbs_marginal",
    "posterior_g_given_z",
    "precision_partition_moments",
    "residual_quadratic_form",
    "sample_truncated_normal",
    "truncnorm_moments",
]

# Intervals lying entirely beyond this many pre-truncation standard deviations
# are sampled by exponential-proposal rejection; the inverse CDF loses
# resolution there because Phi saturates at 1.
_TAIL_SWITCH = 5.0

_SQRT_2PI = math.sqrt(2.0 * math.pi)
_U_LO = 1e-300
_U_HI = np.nextafter(1.0, 0.0)


@dataclass(frozen=True)
class TruncatedNormalSpec:
    """N(mu, sigma2) restricted to the interval (lower, upper)."""

    mu: float
    sigma2: float
    lower: float
    upper: float

    def __post_init__(self):
        if not self.sigma2 > 0.0:
            raise ValueError(f"sigma2 must be positive, got {self.sigma2}")
        if not self.lower < self.upper:
            raise ValueError(
                f"empty truncation interval [{self.lower}, {self.upper}]"
            )


@dataclass(frozen=True)
class GibbsConfig:
    """Chain length (retained sweeps), burn-in, and which chain to run."""

    n_samples: int = 100
    burn_in: int = 100
    seed: int | None = None
    method: str = "joint"

    def __post_init__(self):
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        if self.burn_in < 0:
            raise ValueError("burn_in must be >= 0")
        if self.method not in ("joint", "marginal"):
            raise ValueError(f"method must be 'joint' or 'marginal', got {self.method!r}")


@dataclass
class PosteriorGaussian:
    """Moments of g | z: covariance P_g, mean map H (mean = H z), chol(P_g)."""

    P_g: np.ndarray
    H: np.ndarray
    chol: np.ndarray

    def mean(self, z: np.ndarray) -> np.ndarray:
        return self.H @ z


@dataclass
class ChainStats:
    """Running posterior moments over exactly n_effective retained sweeps.

    The marginal chain fills only ez/ezz; the joint chain also carries the
    g moments and the cross moment egz = E[g z^T | y].
    """

    method: str
    ez: np.ndarray
    ezz: np.ndarray
    n_effective: int
    eg: np.ndarray | None = None
    egg: np.ndarray | None = None
    egz: np.ndarray | None = None
    last_z: np.ndarray | None = None
    last_g: np.ndarray | None = None


@dataclass(frozen=True)
class QuadraticForm:
    """f(g, z) = g'Ag + 2 z'Bg + z'Cz with A (m,m), B (N,m), C (N,N)."""

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray


# ---------------------------------------------------------------------------
# scalar and vectorized truncated-normal draws
# ---------------------------------------------------------------------------


def _tail_draw(a: float, b: float, rng: np.random.Generator) -> float:
    # Exponential proposal with rate alpha tuned to the boundary (Robert 1995);
    # valid for 0 <= a < b, acceptance approaches 1 deep in the tail.
    alpha = 0.5 * (a + math.sqrt(a * a + 4.0))
    span = -math.expm1(-alpha * (b - a)) if math.isfinite(b) else 1.0
    while True:
        x = a - math.log1p(-span * rng.random()) / alpha
        d = x - alpha
        if rng.random() <= math.exp(-0.5 * d * d):
            return x


def _phi_cdf(x: float) -> float:
    if x == -math.inf:
        return 0.0
    if x == math.inf:
        return 1.0
    return 0.5 * math.erfc(-x / math.sqrt(2.0))


def _draw_std(a: float, b: float, rng: np.random.Generator) -> float:
    """One draw from the standard normal truncated to (a, b)."""
    if a >= _TAIL_SWITCH:
        return _tail_draw(a, b, rng)
    if b <= -_TAIL_SWITCH:
        return -_tail_draw(-b, -a, rng)
    fa = _phi_cdf(a)
    fb = _phi_cdf(b)
    u = fa + (fb - fa) * rng.random()
    u = min(max(u, _U_LO), _U_HI)
    return float(ndtri(u))


def _tail_draw_vec(a: np.ndarray, b: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    alpha = 0.5 * (a + np.sqrt(a * a + 4.0))
    with np.errstate(invalid="ignore"):
        span = np.where(np.isfinite(b), -np.expm1(-alpha * (b - a)), 1.0)
    out = np.empty_like(a)
    todo = np.ones(a.shape, dtype=bool)
    while todo.any():
        idx = np.nonzero(todo)[0]
        x = a[idx] - np.log1p(-span[idx] * rng.random(idx.size)) / alpha[idx]
        d = x - alpha[idx]
        accept = rng.random(idx.size) <= np.exp(-0.5 * d * d)
        out[idx[accept]] = x[accept]
        todo[idx[accept]] = False
    return out


def _draw_std_vec(a: np.ndarray, b: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    x = np.empty_like(a)
    hi = a >= _TAIL_SWITCH
    lo = b <= -_TAIL_SWITCH
    mid = ~(hi | lo)
    if mid.any():
        fa = ndtr(a[mid])
        fb = ndtr(b[mid])
        u = fa + (fb - fa) * rng.random(int(mid.sum()))
        np.clip(u, _U_LO, _U_HI, out=u)
        x[mid] = ndtri(u)
    if hi.any():
        x[hi] = _tail_draw_vec(a[hi], b[hi], rng)
    if lo.any():
        x[lo] = -_tail_draw_vec(-b[lo], -a[lo], rng)
    return x


def sample_truncated_normal(spec: TruncatedNormalSpec, rng: np.random.Generator) -> float:
    """Exact draw: inverse CDF in the body, exponential rejection in the tails."""
    s = math.sqrt(spec.sigma2)
    a = (spec.lower - spec.mu) / s
    b = (spec.upper - spec.mu) / s
    return spec.mu + s * _draw_std(a, b, rng)


def truncnorm_moments(
    mu: np.ndarray, sigma2: float, lower: np.ndarray, upper: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Mean and variance of N(mu, sigma2) truncated to (lower, upper), vectorized.

    Intervals confined to one far tail are evaluated through scaled
    complementary error functions, which stay well conditioned where the
    naive ratio phi/(Phi(b) - Phi(a)) underflows.
    """
    from scipy.special import erfcx

    mu = np.atleast_1d(np.asarray(mu, dtype=float))
    a = (np.atleast_1d(np.asarray(lower, dtype=float)) - mu) / math.sqrt(sigma2)
    b = (np.atleast_1d(np.asarray(upper, dtype=float)) - mu) / math.sqrt(sigma2)
    if np.any(a >= b):
        raise ValueError("empty truncation interval")
    r1 = np.empty_like(a)
    r2 = np.empty_like(a)

    flip = b <= 0.0
    aa = np.where(flip, -b, a)
    bb = np.where(flip, -a, b)

    upper_tail = aa >= 0.0
    if upper_tail.any():
        at, bt = aa[upper_tail], bb[upper_tail]
        east = np.where(np.isfinite(bt), np.exp(-0.5 * (bt * bt - at * at)), 0.0)
        denom = erfcx(at / math.sqrt(2.0)) - erfcx(
            np.where(np.isfinite(bt), bt, 0.0) / math.sqrt(2.0)
        ) * east
        common = (2.0 / _SQRT_2PI) / denom
        pa = common
        pb = common * east
        r1[upper_tail] = pa - pb
        r2[upper_tail] = at * pa - np.where(np.isfinite(bt), bt, 0.0) * pb
    body = ~upper_tail
    if body.any():
        at, bt = aa[body], bb[body]
        z = ndtr(bt) - ndtr(at)
        pa = np.where(np.isfinite(at), np.exp(-0.5 * at * at) / _SQRT_2PI, 0.0) / z
        pb = np.where(np.isfinite(bt), np.exp(-0.5 * bt * bt) / _SQRT_2PI, 0.0) / z
        r1[body] = pa - pb
        r2[body] = np.where(np.isfinite(at), at, 0.0) * pa - np.where(
            np.isfinite(bt), bt, 0.0
        ) * pb
    r1 = np.where(flip, -r1, r1)

    s = math.sqrt(sigma2)
    mean = mu + s * r1
    var = sigma2 * (1.0 + r2 - r1 * r1)
    return mean, np.maximum(var, 0.0)


# ---------------------------------------------------------------------------
# Gaussian posterior of g given z, and per-coordinate conditionals
# ---------------------------------------------------------------------------


def conditional_z_given_g(
    g: np.ndarray,
    phi_t: np.ndarray,
    y_t: float,
    q: Quantizer,
    sigma2: float,
) -> TruncatedNormalSpec:
    """Full conditional of one z_t given g: N(phi_t'g, sigma2) on the cell of y_t."""
    lo, hi = q.interval(y_t)
    return TruncatedNormalSpec(
        mu=float(np.dot(phi_t, g)), sigma2=sigma2, lower=lo, upper=hi
    )


def posterior_g_given_z(U: np.ndarray, eta: Hyperparameters) -> PosteriorGaussian:
    """Factors of g | z ~ N(Hz, P_g) for the Gaussian prior N(0, lam K_beta).

    P_g = (U'U / sigma2 + (lam K)^{-1})^{-1} and H = P_g U' / sigma2, computed
    through SPD solves only.
    """
    U = np.asarray(U, dtype=float)
    if not np.any(U):
        raise ValueError("regression matrix is identically zero; nothing is excited")
    N, m = U.shape
    K = build_tc_kernel(eta.beta, m)
    Lk = spd_cholesky(K, context=f"TC kernel, beta={eta.beta:.6g}, m={m}")
    Kinv = cho_solve((Lk, True), np.eye(m)) / eta.lam
    A = U.T @ U / eta.sigma2 + Kinv
    A = 0.5 * (A + A.T)
    La = spd_cholesky(A, context="posterior precision of g")
    P = cho_solve((La, True), np.eye(m))
    P = 0.5 * (P + P.T)
    H = cho_solve((La, True), U.T) / eta.sigma2
    Lp = spd_cholesky(P, context="posterior covariance of g")
    return PosteriorGaussian(P_g=P, H=H, chol=Lp)


def precision_partition_moments(
    Lam: np.ndarray, z: np.ndarray, i: int
) -> tuple[float, float]:
    """Conditional mean and variance of z_i | z_{-i} for N(0, Lam^{-1}).

    Both come straight from row i of the precision matrix:
    var = 1 / Lam[i, i], mean = -(sum_{j != i} Lam[i, j] z_j) / Lam[i, i].
    """
    d = Lam[i, i]
    mean = z[i] - float(Lam[i] @ z) / d
    return mean, 1.0 / d


def residual_quadratic_form(U: np.ndarray) -> QuadraticForm:
    """Quadratic form whose posterior expectation is E[||z - U g||^2 | y]."""
    N, m = U.shape
    return QuadraticForm(A=U.T @ U, B=-U, C=np.eye(N))


# ---------------------------------------------------------------------------
# chains
# ---------------------------------------------------------------------------


def _cell_bounds(q: Quantizer | None, y: np.ndarray):
    if q is None:
        return None
    lo, hi = q.intervals_for(y)
    return np.asarray(lo, dtype=float), np.asarray(hi, dtype=float), q.closed


def _clip_into_cells(z: np.ndarray, bounds) -> np.ndarray:
    # Rounding in mu + s * x_std can land exactly on an excluded boundary;
    # nudge by one ulp so the hard quantization constraint holds exactly.
    lo, hi, closed = bounds
    if closed == "right":
        return np.clip(z, np.nextafter(lo, np.inf), hi)
    return np.clip(z, lo, np.nextafter(hi, -np.inf))


def _assert_in_cells(z: np.ndarray, bounds) -> None:
    lo, hi, closed = bounds
    if closed == "right":
        ok = (z > lo) & (z <= hi)
    else:
        ok = (z >= lo) & (z < hi)
    if not bool(np.all(ok)):
        bad = int(np.nonzero(~ok)[0][0])
        raise RuntimeError(
            f"chain left the quantization cell at index {bad}: "
            f"z={z[bad]} not in ({lo[bad]}, {hi[bad]})"
        )


def _open_trace(trace_path):
    return None if trace_path is None else open(trace_path, "w")


def _write_trace_row(fh, vec: np.ndarray) -> None:
    if fh is not None:
        fh.write(" ".join(repr(float(x)) for x in vec) + "\n")


def gibbs_joint(
    U: np.ndarray,
    q: Quantizer | None,
    y: np.ndarray,
    eta: Hyperparameters,
    cfg: GibbsConfig,
    rng: np.random.Generator,
    g0: np.ndarray | None = None,
    trace_path=None,
) -> ChainStats:
    """Joint chain over (g, z): z | g is a product of scalar truncated normals
    (the noise is white, so the coordinates decouple given g), then one draw of
    g | z ~ N(Hz, P_g).  q=None means z is observed exactly (z = y).

    Moments are averaged over exactly cfg.n_samples sweeps after discarding
    cfg.burn_in sweeps.
    """
    U = np.asarray(U, dtype=float)
    y = np.asarray(y, dtype=float)
    N, m = U.shape
    post = posterior_g_given_z(U, eta)
    sigma = math.sqrt(eta.sigma2)
    bounds = _cell_bounds(q, y)
    g = post.H @ y if g0 is None else np.asarray(g0, dtype=float).copy()

    ez = np.zeros(N)
    ezz = np.zeros((N, N))
    eg = np.zeros(m)
    egg = np.zeros((m, m))
    egz = np.zeros((m, N))
    M = cfg.n_samples
    z = y.copy()
    fh = _open_trace(trace_path)
    try:
        for k in range(cfg.burn_in + M):
            if bounds is not None:
                mu = U @ g
                a = (bounds[0] - mu) / sigma
                b = (bounds[1] - mu) / sigma
                z = mu + sigma * _draw_std_vec(a, b, rng)
                z = _clip_into_cells(z, bounds)
                _assert_in_cells(z, bounds)
            g = post.H @ z + post.chol @ rng.standard_normal(m)
            if k >= cfg.burn_in:
                ez += z
                ezz += np.outer(z, z)
                eg += g
                egg += np.outer(g, g)
                egz += np.outer(g, z)
                _write_trace_row(fh, g)
    finally:
        if fh is not None:
            fh.close()
    return ChainStats(
        method="joint",
        ez=ez / M,
        ezz=ezz / M,
        n_effective=M,
        eg=eg / M,
        egg=egg / M,
        egz=egz / M,
        last_z=z.copy(),
        last_g=g.copy(),
    )


def gibbs_marginal(
    U: np.ndarray,
    q: Quantizer | None,
    y: np.ndarray,
    eta: Hyperparameters,
    cfg: GibbsConfig,
    rng: np.random.Generator,
    z0: np.ndarray | None = None,
    trace_path=None,
) -> ChainStats:
    """Chain over z alone, with g integrated out of the model.

    z | y is the N-variate Gaussian N(0, Sigma_z), Sigma_z = lam U K U' +
    sigma2 I, truncated to the box of observed cells.  The precision matrix
    Lam = Sigma_z^{-1} is assembled once; each coordinate's conditional mean
    and variance then cost one inner product (precision partitioning).
    """
    U = np.asarray(U, dtype=float)
    y = np.asarray(y, dtype=float)
    if not np.any(U):
        raise ValueError("regression matrix is identically zero; nothing is excited")
    N, m = U.shape
    M = cfg.n_samples
    if q is None:
        # Observed z: the truncated box collapses to the single point y.
        return ChainStats(
            method="marginal",
            ez=y.copy(),
            ezz=np.outer(y, y),
            n_effective=M,
            last_z=y.copy(),
        )
    K = build_tc_kernel(eta.beta, m)
    Sigma = eta.lam * (U @ K @ U.T) + eta.sigma2 * np.eye(N)
    Sigma = 0.5 * (Sigma + Sigma.T)
    Ls = spd_cholesky(Sigma, context="marginal covariance of z")
    Lam = cho_solve((Ls, True), np.eye(N))
    Lam = 0.5 * (Lam + Lam.T)
    d = np.diag(Lam).copy()
    stds = np.sqrt(1.0 / d)

    lo, hi, closed = _cell_bounds(q, y)
    if closed == "right":
        lo_c, hi_c = np.nextafter(lo, np.inf), hi.copy()
    else:
        lo_c, hi_c = lo.copy(), np.nextafter(hi, -np.inf)
    if z0 is None:
        # Midpoints of the observed cells, with unbounded sides clamped to
        # three marginal standard deviations.
        sd = np.sqrt(np.diag(Sigma))
        z = 0.5 * (np.maximum(lo, -3.0 * sd) + np.minimum(hi, 3.0 * sd))
        z = np.clip(z, lo_c, hi_c)
    else:
        z = np.clip(np.asarray(z0, dtype=float), lo_c, hi_c)
    _assert_in_cells(z, (lo, hi, closed))

    ez = np.zeros(N)
    ezz = np.zeros((N, N))
    fh = _open_trace(trace_path)
    try:
        for k in range(cfg.burn_in + M):
            w = Lam @ z
            for i in range(N):
                m_i = z[i] - w[i] / d[i]
                s_i = stds[i]
                a = (lo[i] - m_i) / s_i
                b = (hi[i] - m_i) / s_i
                znew = m_i + s_i * _draw_std(a, b, rng)
                znew = min(max(znew, lo_c[i]), hi_c[i])
                dz = znew - z[i]
                if dz != 0.0:
                    w += Lam[i] * dz
                z[i] = znew
            _assert_in_cells(z, (lo, hi, closed))
            if k >= cfg.burn_in:
                ez += z
                ezz += np.outer(z, z)
                _write_trace_row(fh, z)
    finally:
        if fh is not None:
            fh.close()
    return ChainStats(
        method="marginal",
        ez=ez / M,
        ezz=ezz / M,
        n_effective=M,
        last_z=z.copy(),
    )


# ---------------------------------------------------------------------------
# posterior functionals
# ---------------------------------------------------------------------------


def _trace_dot(X: np.ndarray, Y: np.ndarray) -> float:
    # tr(X @ Y) without forming the product.
    return float(np.sum(X * Y.T))


def expected_quadratic(
    stats: ChainStats, qf: QuadraticForm, post: PosteriorGaussian | None = None
) -> float:
    """Posterior expectation of f(g, z) = g'Ag + 2 z'Bg + z'Cz.

    The joint chain averages f over its (g, z) samples (via the stored moment
    matrices); the marginal chain uses the exact reduction to z moments, which
    requires the Gaussian posterior factors of g | z.
    """
    if stats.method == "joint":
        if stats.egg is None or stats.egz is None:
            raise ValueError("joint-path expectation needs g moments in ChainStats")
        return (
            _trace_dot(qf.A, stats.egg)
            + 2.0 * _trace_dot(qf.B, stats.egz)
            + _trace_dot(qf.C, stats.ezz)
        )
    if post is None:
        raise ValueError("marginal-path expectation needs the posterior factors of g|z")
    inner = post.H.T @ qf.A @ post.H + 2.0 * qf.B @ post.H + qf.C
    return _trace_dot(qf.A, post.P_g) + _trace_dot(inner, stats.ezz)


def expected_g(stats: ChainStats, post: PosteriorGaussian | None = None) -> np.ndarray:
    """Posterior mean of g: the joint chain's sample mean, or H E[z|y]."""
    if stats.method == "joint":
        if stats.eg is None:
            raise ValueError("joint-path mean needs g moments in ChainStats")
        return stats.eg.copy()
    if post is None:
        raise ValueError("marginal-path mean needs the posterior factors of g|z")
    return post.H @ stats.ez
