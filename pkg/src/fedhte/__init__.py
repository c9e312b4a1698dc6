"""Doubly robust targeted-federated estimation of heterogeneous treatment effects.

The package provides:

* working structural models projecting potential outcomes onto a chosen
  basis of effect modifiers, for identity, log, and logit links;
* doubly robust estimation from a single target dataset or from a
  federation of sites that exchange only fixed-dimension aggregates;
* exponential-tilting density-ratio calibration of covariate shift;
* bootstrap inference and a bootstrap-based screen for non-transportable
  source sites;
* a single-round coordinator/site protocol with loopback, file-exchange,
  and TCP transports; and
* a seeded Monte Carlo harness for benchmarking the estimators.
"""

from .design import HteEstimate, WorkingDesign, build_design_rows
from .errors import (
    BootstrapError,
    ConfigError,
    ConvergenceError,
    DataValidationError,
    DesignError,
    FedhteError,
    FramingError,
    PositivityError,
    ProtocolError,
    StudyError,
)
from .estimators import FederatedHte, TargetOnlyHte
from .glm import (
    GlmSpec,
    NuisanceFit,
    fit_linear,
    fit_logistic,
    fit_outcome,
    fit_propensity,
    or_spec,
    predict_or,
    predict_ps,
    ps_spec,
)
from .inference import (
    BootstrapPlan,
    BootstrapResult,
    SelectionReport,
    SelectionRule,
    SourceDecision,
    bootstrap_se,
    select_sources,
)
from .links import IDENTITY, LOG, LOGIT, LinkFunction, get_link
from .sandwich import sandwich_variance_federated, sandwich_variance_target
from .solver import (
    AugmentationVector,
    WeightScheme,
    compute_p_source,
    compute_p_target,
    estimate_federated,
    estimate_target_only,
    solve_beta,
)
from .tables import ObservationTable, TableSchema, from_schema, load_csv
from .tilting import TiltFit, TiltSpec, fit_tilt, target_moments, tilt_weights

__version__ = "0.1.0"

__all__ = [
    "AugmentationVector",
    "BootstrapError",
    "BootstrapPlan",
    "BootstrapResult",
    "ConfigError",
    "ConvergenceError",
    "DataValidationError",
    "DesignError",
    "FedhteError",
    "FederatedHte",
    "FramingError",
    "GlmSpec",
    "HteEstimate",
    "IDENTITY",
    "LOG",
    "LOGIT",
    "LinkFunction",
    "NuisanceFit",
    "ObservationTable",
    "PositivityError",
    "ProtocolError",
    "SelectionReport",
    "SelectionRule",
    "SourceDecision",
    "StudyError",
    "TableSchema",
    "TargetOnlyHte",
    "TiltFit",
    "TiltSpec",
    "WeightScheme",
    "WorkingDesign",
    "bootstrap_se",
    "build_design_rows",
    "compute_p_source",
    "compute_p_target",
    "estimate_federated",
    "estimate_target_only",
    "fit_linear",
    "fit_logistic",
    "fit_outcome",
    "fit_propensity",
    "fit_tilt",
    "from_schema",
    "get_link",
    "load_csv",
    "or_spec",
    "predict_or",
    "predict_ps",
    "ps_spec",
    "sandwich_variance_federated",
    "sandwich_variance_target",
    "select_sources",
    "solve_beta",
    "target_moments",
    "tilt_weights",
]
