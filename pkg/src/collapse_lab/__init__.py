"""Neural collapse on the unconstrained feature model.

Losses and their logit derivatives, the regularized UFM objective with a
deterministic trainer, NC1-NC4 metrics, global-optimality certificates and
randomized checks of the supporting linear-algebra lemmas.
"""

from .certify import (
    Certificate,
    RhoSolution,
    classify_critical_point,
    construct_global_solution,
    global_certificate,
    negative_curvature_direction,
    rho_oracle,
)
from .estimator import UnconstrainedFeatureModel
from .exceptions import (
    CollapseLabError,
    ConfigError,
    DegenerateInputError,
    DimensionError,
    DivergenceError,
    NotStrictSaddleError,
    NumericalFailure,
    UnsupportedLossError,
)
from .geometry import embedded_etf, gram_alignment, nc1, nc2, nc3, nc4, nc_metrics, standard_etf
from .losses import LossSpec
from .ufm import Hyper, TrainConfig, TrainResult, UfmState, gradient, objective, train

__version__ = "0.1.0"

__all__ = [
    "Certificate", "CollapseLabError", "ConfigError", "DegenerateInputError", "DimensionError",
    "DivergenceError", "Hyper", "LossSpec", "NotStrictSaddleError", "NumericalFailure",
    "RhoSolution", "TrainConfig", "TrainResult", "UfmState", "UnconstrainedFeatureModel",
    "UnsupportedLossError", "classify_critical_point", "construct_global_solution",
    "embedded_etf", "global_certificate", "gradient", "gram_alignment", "nc1", "nc2", "nc3",
    "nc4", "nc_metrics", "negative_curvature_direction", "objective", "rho_oracle",
    "standard_etf", "train",
]
