"""Grid GMLE of mixing distributions for stratified count data with non-response."""

from .ci import CellCounts, CellScheme, CiResult, cell_probabilities, chi2_quantile, ci_bounds, confidence_interval, default_cell_scheme
from .estimators import (
    EstimateSet,
    Undefined,
    estimate_all,
    extreme_collapse_estimator,
    gmle_plug_in,
    naive_estimator,
    posterior_mean,
    posterior_means,
    truncated_reweight,
)
from .grid import MixingDistribution, ParameterGrid, build_product_grid, default_xi_range, functional_mean
from .models import (
    BinomialStratumKernel,
    BinomialStratumParam,
    CountObservation,
    ExpFamKernel,
    PoissonStratumKernel,
    PoissonStratumParam,
    TruncatedGeometricKernel,
    TruncatedInterviewObservation,
    make_kernel,
)
from .npmle import EmConfig, EmReport, LikelihoodMatrix, brute_force_gmle, build_likelihood_matrix, em_fit, log_likelihood
from .sim import PopulationSpec, SimResult, run_campaign, true_eta, weak_convergence_probe

__version__ = "0.1.0"
