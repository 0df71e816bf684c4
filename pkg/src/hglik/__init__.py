"""Hierarchical GLMs fitted by h-likelihood and adjusted profile likelihoods."""

from .aphl import AphlValue, ProfileCurve, adjust_profile, laplace_marginal, param_profile, re_profile, restricted_lik
from .errors import (ColumnError, ConfigError, ConvergenceError, CurvatureError, DesignError, DomainError,
                     EvaluationError, HglikError, NumericalError, SimulationError)
from .fit import FitOptions, FitResult, fit, maximize_marginal
from .hlik import BlockFactor, HessianBlocks, ParamState, eval_h, glm_fit, grad_h, hess_h, joint_mode, v_mode
from .model import DesignSet, Family, Link, ModelSpec, RandomSpec, build_model, read_table
from .predict import PredictiveDist, plugin_predictive, profile_predictive, tv_distance
from .structures import (NeighborhoodMatrix, PrecisionStructure, ar1_precision, car_precision,
                         factor_loading_cov, iid_precision, neighborhood_from_adjacency)
from .uncert import CoverageConfig, CoverageReport, VarDecomp, coverage_sim, var_decomp, wald_intervals

__version__ = "0.1.0"
