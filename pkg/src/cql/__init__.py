"""Penalized composite quantile/least-squares regression with data-driven weights."""
from .errors import ContractError, InputError, NumericalError
from .losses import CompositeWeights, LossBasis, LossComponent, composite_loss, composite_subgradient
from .penalty import PenaltyRule, PenaltyVector, penalty_vector
from .solver import (Dataset, FitResult, KktCertificate, SolverOptions, check_kkt,
                     cross_validate, fit_composite, fit_lasso)
from .adapt import (CovarianceEstimate, MomentEstimate, TwoStepResult, covariance_estimate,
                    equal_weights, estimate_moments, one_step_update, optimal_weights, two_step_fit)
from .distributions import CATALOG, ErrorDistribution, fisher_information, get_distribution
from .efficiency import (L1L2Constants, cqr_optimal_weights, cqr_sigma2, efficiency_table,
                         l1l2_constants, l1l2_optimal, relative_efficiency, sigma2_composite,
                         weight_table)
from .simulate import (Scenario, count_tp_fp, generate_data, model_error, run_scenario,
                       screen_marginal)

__version__ = "0.1.0"
