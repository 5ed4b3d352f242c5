"""Shared estimation pipeline: every method on one cohort and phase-two sample."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .calibration import (
    AuxiliaryMatrix,
    RakingFit,
    build_auxiliary_naive,
    cox_covariates,
    ht_estimate,
    naive_fit,
    raking_estimate,
)
from .cohort import Cohort, TwoPhaseSample
from .cox import fit_cox
from .errors import ParameterError, RakesurvError, StateError
from .imputation import fcsmi_auxiliary, grmi_auxiliary, if_calibration_auxiliary
from .numeric import RngStream

METHODS = (
    "True", "Naive", "HT", "GRN",
    "GRMIS", "GRMIC", "GRFCSMIS", "GRFCSMIC",
    "IF-GRMIS", "IF-GRMIC", "IF-GRFCSMIS", "IF-GRFCSMIC",
)

# child index of the estimation stream used by each imputation family
_IMPUTATION_STREAM = {"GRMIS": 1, "GRMIC": 2, "GRFCSMIS": 3, "GRFCSMIC": 4}


@dataclass(frozen=True)
class EstimationSettings:
    """Tuning shared by the imputation-based methods.

    Parameters
    ----------
    M : int
        Number of imputations.
    L : int
        Chained-update rounds per imputation.
    fcs_vars : int or tuple
        Variables imputed by chained imputation (see :func:`fcsmi_auxiliary`).
    intercept : bool
        Calibrate the weight total alongside the auxiliaries.
    """

    M: int = 10
    L: int = 50
    fcs_vars: object = 3
    intercept: bool = True


@dataclass(frozen=True, eq=False)
class MethodResult:
    method: str
    beta: Optional[np.ndarray] = None
    se: Optional[np.ndarray] = None
    error: Optional[str] = None
    calib_residual: Optional[float] = None
    g_range: Optional[tuple] = None

    @property
    def ok(self) -> bool:
        return self.error is None


def check_methods(methods):
    unknown = [m for m in methods if m not in METHODS]
    if unknown:
        raise ParameterError(f"unknown methods {unknown}; expected a subset of {METHODS}")
    return tuple(methods)


def _from_raking(method, fit: RakingFit, aux: Optional[AuxiliaryMatrix]):
    resid = None
    if fit.calib_residual is not None:
        resid = float(np.max(np.abs(fit.calib_residual)) / (1.0 + np.max(np.abs(aux.totals))))
    return MethodResult(method, fit.beta, fit.se, calib_residual=resid, g_range=fit.g_range)


def estimate_methods(cohort: Cohort, sample: TwoPhaseSample, methods, settings: EstimationSettings,
                     stream: RngStream, naive_aux: Optional[AuxiliaryMatrix] = None) -> dict:
    """Fit each requested method; failures are recorded, never raised.

    Parameters
    ----------
    stream : RngStream
        Estimation stream; imputation family ``k`` uses ``stream.child(k)``.
    naive_aux : AuxiliaryMatrix, optional
        Precomputed naive dfbetas (reused when the design needed them).

    Returns
    -------
    dict
        Method name to :class:`MethodResult`, in the order requested.
    """
    methods = check_methods(methods)
    out = {}
    cache = {}

    def run(method, fn):
        try:
            out[method] = fn()
        except (RakesurvError, np.linalg.LinAlgError, FloatingPointError) as exc:
            out[method] = MethodResult(method, error=f"{type(exc).__name__}: {exc}")

    def ht():
        if "HT" not in cache:
            cache["HT"] = ht_estimate(cohort, sample)
        return cache["HT"]

    def grn_aux():
        nonlocal naive_aux
        if naive_aux is None:
            naive_aux = build_auxiliary_naive(cohort, settings.intercept)
        return naive_aux

    def imputation(base):
        if base not in cache:
            gen = stream.child(_IMPUTATION_STREAM[base])
            complex_ = base.endswith("C")
            if base.startswith("GRMI"):
                cache[base] = grmi_auxiliary(cohort, sample, settings.M, complex_, gen, settings.intercept)
            else:
                cache[base] = fcsmi_auxiliary(cohort, sample, settings.M, settings.L, settings.fcs_vars,
                                              complex_, gen, settings.intercept)
        return cache[base]

    def rake(method, aux):
        try:
            init = ht().beta
        except RakesurvError:
            init = None
        return _from_raking(method, raking_estimate(cohort, sample, aux, init=init), aux)

    for method in methods:
        if method == "True":
            def true_fit():
                x, z, u, delta = cohort.full_truth()
                fit = fit_cox(cox_covariates(x, z), u, delta)
                if not fit.converged:
                    raise StateError("true-data Cox fit did not converge")
                return MethodResult("True", fit.beta, np.sqrt(np.diag(fit.covariance())))
            run(method, true_fit)
        elif method == "Naive":
            def naive():
                fit, _ = naive_fit(cohort)
                return MethodResult("Naive", fit.beta, np.sqrt(np.diag(fit.covariance())))
            run(method, naive)
        elif method == "HT":
            run(method, lambda: _from_raking("HT", ht(), None))
        elif method == "GRN":
            run(method, lambda: rake("GRN", grn_aux()))
        elif method in _IMPUTATION_STREAM:
            run(method, lambda m=method: rake(m, imputation(m).aux))
        else:
            base = method[3:]

            def if_method(m=method, b=base):
                aux, _ = if_calibration_auxiliary(cohort, sample, imputation(b), settings.intercept)
                return rake(m, aux)
            run(method, if_method)
    return out
