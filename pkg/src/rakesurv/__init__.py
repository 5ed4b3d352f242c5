"""Generalized raking estimators for the Cox model in two-phase validation designs."""

__version__ = "0.1.0"

from .calibration import AuxiliaryMatrix, RakingFit, ht_estimate, raking_estimate, solve_raking_weights
from .cohort import Cohort, TwoPhaseSample
from .cox import CoxFit, dfbeta, fit_cox
from .designs import DesignSpec, draw_design
from .estimators import METHODS, EstimationSettings, estimate_methods
from .numeric import RngStream
from .simulation import ScenarioConfig, aggregate_metrics, run_simulation

__all__ = [
    "AuxiliaryMatrix", "Cohort", "CoxFit", "DesignSpec", "EstimationSettings", "METHODS",
    "RakingFit", "RngStream", "ScenarioConfig", "TwoPhaseSample", "aggregate_metrics", "dfbeta",
    "draw_design", "estimate_methods", "fit_cox", "ht_estimate", "raking_estimate",
    "run_simulation", "solve_raking_weights",
]
