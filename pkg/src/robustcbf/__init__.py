"""Learned-uncertainty robust barrier-function safety filter for multi-agent navigation."""

from .bounds import (
    ConfidenceEllipsoid,
    UncertaintyPolytope,
    ZetaBounds,
    build_ellipsoid,
    chi2_quantile,
    to_polytope,
    zeta_from_ellipsoid,
    zeta_from_polytope,
)
from .cbf import BarrierParams, CbcCoefficients, a_max_compute, cbc_coefficients, cbc_exact, h_value
from .core import AgentState, Disturbance, constant_velocity, drag_double_integrator, extract_disturbance
from .mvg import KernelParams, MvgModel, TrainConfig, observe, posterior, train
from .robustqp import assemble, primal_worst_case, solve

__version__ = "0.1.0"

__all__ = [
    "AgentState",
    "BarrierParams",
    "CbcCoefficients",
    "ConfidenceEllipsoid",
    "Disturbance",
    "KernelParams",
    "MvgModel",
    "TrainConfig",
    "UncertaintyPolytope",
    "ZetaBounds",
    "a_max_compute",
    "assemble",
    "build_ellipsoid",
    "cbc_coefficients",
    "cbc_exact",
    "chi2_quantile",
    "constant_velocity",
    "drag_double_integrator",
    "extract_disturbance",
    "h_value",
    "observe",
    "posterior",
    "primal_worst_case",
    "solve",
    "to_polytope",
    "train",
    "zeta_from_ellipsoid",
    "zeta_from_polytope",
]
