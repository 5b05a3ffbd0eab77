"""Bayesian identification of linear systems from quantized output data.

The package estimates an FIR impulse response g from input u and quantized
observations y_t = Q[z_t], z = U g + e, by combining a stable spline prior on
g with Gibbs sampling over the latent z, and tunes the prior by empirical
Bayes (EM).  Classic baselines and a Monte Carlo benchmark harness for
comparing them are included.
"""

from .baselines import EstimatorResult, kb_standard, map_gs, ml_gs
from .bench import (
    ExperimentConfig,
    FitReport,
    binary_experiment,
    ceil_experiment,
    fit_score,
    run_experiment,
    summarize,
)
from .inference import EmConfig, EmTrace, EStepStats, e_step, em_identify, m_step
from .kernel import (
    Hyperparameters,
    build_tc_kernel,
    kernel_logdet,
    kernel_quadform_inv,
)
from .sampler import (
    ChainStats,
    GibbsConfig,
    PosteriorGaussian,
    QuadraticForm,
    TruncatedNormalSpec,
    expected_g,
    expected_quadratic,
    gibbs_joint,
    gibbs_marginal,
    posterior_g_given_z,
    sample_truncated_normal,
)
from .signal import (
    Dataset,
    LtiSystem,
    Quantizer,
    binary_quantizer,
    calibrate_noise,
    ceil_quantizer,
    impulse_response,
    load_dataset,
    quantize,
    regression_matrix,
    sample_random_system,
    save_dataset,
    simulate,
)

__version__ = "0.1.0"
