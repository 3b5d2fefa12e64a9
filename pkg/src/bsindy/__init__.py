"""Sparse identification of dynamical systems with neuronized-prior MCMC."""

from .dynamics import (
    DerivativeData, DivergenceError, SystemDef, Trajectory, add_gaussian_noise,
    analytic_derivative, forward_euler_derivative, integrate, lorenz, pendulum, smoothed_gradient,
)
from .library import (
    BasisTerm, DesignMatrix, NormRecord, build_design, denormalize_coefficients, normalize, term_system,
)
from .sindy import StlsResult, least_squares, stls
from .neuronized import (
    Activation, PriorConfig, activation_eval, alpha0_from_sparsity, prior_sample, select_tau_w,
    tau_w_horseshoe_calibration,
)
from .mcmc import (
    Chain, ChainConfig, log_likelihood, mh_alpha_step, relu_exact_alpha_step, run_chain,
    sample_sigma2, sample_w_conditional,
)
from .diagnostics import (
    FitReport, PredictiveEnsemble, geweke_score, inclusion_probabilities, posterior_predictive,
    summarize, windowed_autocorrelation,
)

__version__ = "0.1.0"
