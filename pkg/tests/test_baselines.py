import numpy as np
import pytest

from qsysid.baselines import gaussian_log_evidence, kb_standard, map_gs, ml_gs
from qsysid.inference import EmConfig
from qsysid.kernel import Hyperparameters, build_tc_kernel
from qsysid.sampler import GibbsConfig, posterior_g_given_z
from qsysid.signal import binary_quantizer, quantize, regression_matrix, simulate


def _gaussian_problem(seed=0, N=60, m=4, sigma2=0.3):
    rng = np.random.default_rng(seed)
    g = rng.normal(size=m)
    u = rng.normal(size=N)
    z = simulate(g, u, sigma2, rng) if sigma2 > 0 else simulate(g, u, 0.0)
    return u, z, g


def test_gaussian_log_evidence_matches_dense_logpdf():
    rng = np.random.default_rng(1)
    N, m = 25, 4
    u = rng.normal(size=N)
    U = regression_matrix(u, N, m)
    y = rng.normal(size=N)
    G, b, yty = U.T @ U, U.T @ y, float(y @ y)
    for lam, beta, sigma2 in [(0.5, 0.6, 0.3), (3.0, 0.9, 1.2), (1e-3, 0.2, 0.05)]:
        Sigma = lam * U @ build_tc_kernel(beta, m) @ U.T + sigma2 * np.eye(N)
        sign, logdet = np.linalg.slogdet(Sigma)
        expected = -0.5 * (
            N * np.log(2.0 * np.pi) + logdet + y @ np.linalg.solve(Sigma, y)
        )
        got = gaussian_log_evidence(lam, beta, sigma2, G, b, yty, N)
        assert got == pytest.approx(expected, rel=1e-9)


def test_kb_standard_noiseless_limit_is_least_squares():
    u, z, g = _gaussian_problem(seed=2, sigma2=0.0)
    res = kb_standard(u, z, m=4)
    U = regression_matrix(u, len(z), 4)
    g_ls = np.linalg.lstsq(U, z, rcond=None)[0]
    assert np.linalg.norm(res.g_hat - g_ls) / np.linalg.norm(g_ls) < 1e-2


def test_kb_standard_beats_its_search_grid():
    # polish must never return hyperparameters worse than the grid it scanned
    u, z, _ = _gaussian_problem(seed=3)
    N, m = len(z), 4
    res = kb_standard(u, z, m=m, lam_grid=12, beta_grid=12)
    U = regression_matrix(u, N, m)
    G, b, yty = U.T @ U, U.T @ z, float(z @ z)
    eta = res.eta_hat
    best = gaussian_log_evidence(eta.lam, eta.beta, eta.sigma2, G, b, yty, N)
    for lam in np.logspace(-4.0, 4.0, 12):
        for beta in np.linspace(1e-4, 1 - 1e-4, 12):
            val = gaussian_log_evidence(lam, beta, eta.sigma2, G, b, yty, N)
            assert best >= val - 1e-9


def test_kb_standard_noise_estimate_is_residual_variance():
    u, z, _ = _gaussian_problem(seed=4, N=80, m=5)
    res = kb_standard(u, z, m=5)
    U = regression_matrix(u, 80, 5)
    resid = z - U @ np.linalg.lstsq(U, z, rcond=None)[0]
    assert res.eta_hat.sigma2 == pytest.approx(resid @ resid / (80 - 5), rel=1e-10)


def test_kb_standard_fits_gaussian_data_well():
    rng = np.random.default_rng(5)
    m, N = 6, 200
    g = rng.normal(size=m) * 0.8 ** np.arange(1, m + 1)
    u = rng.normal(size=N)
    z = simulate(g, u, 0.05, rng)
    res = kb_standard(u, z, m=m)
    fit = 1.0 - np.linalg.norm(g - res.g_hat) / np.linalg.norm(g)
    assert fit > 0.8


# ------------------------------------------------------ ML with quantizer


def _binary_problem(seed=0, N=80, m=4, sigma2=0.3):
    rng = np.random.default_rng(seed)
    g = rng.normal(size=m)
    u = rng.normal(size=N)
    z = simulate(g, u, sigma2, rng)
    q = binary_quantizer(0.5)
    return u, quantize(q, z), q, g


def test_ml_gs_without_quantizer_is_ordinary_least_squares():
    u, z, g = _gaussian_problem(seed=6)
    res = ml_gs(u, z, None, 4, EmConfig())
    U = regression_matrix(u, len(z), 4)
    g_ls = np.linalg.lstsq(U, z, rcond=None)[0]
    np.testing.assert_allclose(res.g_hat, g_ls, rtol=1e-8)
    assert res.converged
    assert res.eta_hat is None


def test_ml_gs_binary_runs_and_is_finite():
    u, y, q, g = _binary_problem(seed=7)
    res = ml_gs(u, y, q, 4, EmConfig())
    assert np.isfinite(res.g_hat).all()
    assert res.iterations >= 1


def test_ml_gs_sampled_estep_tracks_analytic():
    u, y, q, g = _binary_problem(seed=8, N=60)
    cfg = EmConfig(max_iters=60)
    exact = ml_gs(u, y, q, 4, cfg)
    cfg_mc = EmConfig(max_iters=60, gibbs_em=GibbsConfig(n_samples=3000, burn_in=1))
    noisy = ml_gs(u, y, q, 4, cfg_mc, rng=np.random.default_rng(9), sample_estep=True)
    rel = np.linalg.norm(exact.g_hat - noisy.g_hat) / np.linalg.norm(exact.g_hat)
    assert rel < 0.1


def test_ml_gs_sampled_estep_requires_rng():
    u, y, q, _ = _binary_problem(seed=10)
    with pytest.raises(ValueError):
        ml_gs(u, y, q, 4, EmConfig(), sample_estep=True)


def test_ml_gs_handles_rank_deficient_regressors():
    # two of the three delayed-input columns are identically zero here
    u = np.array([0.0, 0.0, 0.0, 0.0, 1.0])
    y = np.array([1.0, -1.0, 1.0, -1.0, 1.0])
    q = binary_quantizer(0.5)
    res = ml_gs(u, y, q, 3, EmConfig(max_iters=5))
    assert np.isfinite(res.g_hat).all()


def test_ml_gs_rejects_all_zero_input():
    q = binary_quantizer(0.5)
    with pytest.raises(ValueError):
        ml_gs(np.zeros(5), np.ones(5), q, 2, EmConfig())


# ------------------------------------------------------ MAP with plugin


def test_map_gs_without_quantizer_is_posterior_mean():
    u, z, _ = _gaussian_problem(seed=11)
    eta = Hyperparameters(lam=1.0, beta=0.7, sigma2=0.3)
    res = map_gs(u, z, None, 4, eta, EmConfig())
    U = regression_matrix(u, len(z), 4)
    post = posterior_g_given_z(U, eta)
    np.testing.assert_allclose(res.g_hat, post.H @ z, rtol=1e-12)
    assert res.converged and res.iterations == 1


def test_map_gs_vanishing_prior_scale_shrinks_to_zero():
    u, y, q, _ = _binary_problem(seed=12)
    eta = Hyperparameters(lam=1e-10, beta=0.7, sigma2=0.3)
    res = map_gs(u, y, q, 4, eta, EmConfig())
    assert np.linalg.norm(res.g_hat) < 1e-6


def test_map_gs_binary_runs_and_reports_plugin():
    u, y, q, _ = _binary_problem(seed=13)
    eta = Hyperparameters(lam=1.0, beta=0.8, sigma2=0.4)
    res = map_gs(u, y, q, 4, eta, EmConfig())
    assert np.isfinite(res.g_hat).all()
    assert res.eta_hat is eta


def test_map_gs_sampled_estep_tracks_analytic():
    u, y, q, _ = _binary_problem(seed=14, N=60)
    eta = Hyperparameters(lam=1.0, beta=0.8, sigma2=0.4)
    exact = map_gs(u, y, q, 4, eta, EmConfig())
    cfg_mc = EmConfig(gibbs_em=GibbsConfig(n_samples=3000, burn_in=1))
    noisy = map_gs(
        u, y, q, 4, eta, cfg_mc, rng=np.random.default_rng(15), sample_estep=True
    )
    rel = np.linalg.norm(exact.g_hat - noisy.g_hat) / np.linalg.norm(exact.g_hat)
    assert rel < 0.1
