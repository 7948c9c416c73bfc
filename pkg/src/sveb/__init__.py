"""Spatially varying empirical Bayes small area estimation.

Two-stage conjugate area-level models (Fay-Herriot, Poisson-gamma,
binomial-beta) whose hyperparameters vary over space, fitted by kernel
weighted local marginal likelihood with cross-validated bandwidth, plus
bootstrap MSE estimation, benchmarking, non-sampled-area prediction,
and a replication harness.
"""

from .families import (
    AreaRecord,
    HyperParams,
    GAUSSIAN,
    POISSON_GAMMA,
    BINOMIAL_BETA,
    get_family,
    bayes_estimate,
    marginal_loglik,
    prior_variance,
    r1,
    sample_area,
)
from .localfit import (
    KernelConfig,
    FitOptions,
    SvFit,
    fit_all,
    fit_constant,
    fit_local,
    fit_local_loo,
    kernel_weight,
    local_loglik,
)
from .bandwidth import BandwidthSearch, cv_criterion, default_search, golden_section, select_bandwidth
from .uncertainty import (
    BootstrapConfig,
    benchmark_estimates,
    excess_mse,
    hybrid_mse,
    naive_mse,
    nonsampled_mse,
    predict_nonsampled,
)
from .simharness import ScenarioConfig, gen_scenario, rb_cv_study, relative_difference, simulate_mse

__version__ = "0.1.0"
