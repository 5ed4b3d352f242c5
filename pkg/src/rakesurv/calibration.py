"""Horvitz-Thompson and generalized raking estimation of Cox coefficients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .cohort import Cohort, TwoPhaseSample
from .cox import CoxFit, dfbeta, fit_cox
from .errors import (
    CalibrationFailure,
    DimensionError,
    ParameterError,
    RankDeficiencyError,
    SingularMatrixError,
    StateError,
)
from .numeric import solve_spd

MAX_ITER = 100
G_CAP = 1e6
CALIB_TOL = 1e-10


@dataclass(frozen=True, eq=False)
class AuxiliaryMatrix:
    """Auxiliary variables ``A`` for every phase-one subject.

    ``a`` holds the substantive columns only; the constant column used for
    intercept calibration is added by the solver when requested.
    """

    a: np.ndarray
    source: str = "GRN"
    intercept: bool = True

    def __post_init__(self):
        a = np.asarray(self.a, dtype=float)
        if a.ndim == 1:
            a = a[:, None]
        if a.ndim != 2:
            raise DimensionError("auxiliary matrix must be two-dimensional")
        if not np.all(np.isfinite(a)):
            raise ParameterError("auxiliary matrix has non-finite entries")
        object.__setattr__(self, "a", a)

    def design(self) -> np.ndarray:
        """Columns used in the calibration equations."""
        if self.intercept:
            return np.column_stack([self.a, np.ones(self.a.shape[0])])
        return self.a

    @property
    def totals(self) -> np.ndarray:
        return self.design().sum(axis=0)


@dataclass(frozen=True, eq=False)
class RakingWeights:
    lam: np.ndarray
    g: np.ndarray
    calib_residual: np.ndarray
    iterations: int


@dataclass(frozen=True, eq=False)
class RakingFit:
    """Raked (or HT when ``lam`` is None) Cox estimate with its covariance."""

    beta: np.ndarray
    covariance: np.ndarray
    weights: np.ndarray
    fit: CoxFit
    lam: Optional[np.ndarray] = None
    calib_residual: Optional[np.ndarray] = None
    g_range: tuple = (1.0, 1.0)

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.diag(self.covariance))


def cox_covariates(x, z) -> np.ndarray:
    """Cox design ``(X, Z)``."""
    return np.column_stack([x, z])


def _check_sample(cohort: Cohort, sample: TwoPhaseSample):
    if sample.n_subjects != cohort.n_subjects:
        raise DimensionError("sample and cohort sizes differ")
    if sample.n_validated == 0:
        raise ParameterError("validation sample is empty")


def solve_raking_weights(aux: AuxiliaryMatrix, sample: TwoPhaseSample, max_iter=MAX_ITER) -> RakingWeights:
    """Raking multipliers ``g_i = exp(lam' A_i)`` satisfying the calibration equations.

    Newton's method on the convex dual ``sum_R d_i exp(lam'A_i) - lam'T``
    with ``d = 1/pi`` and ``T = sum_all A_i``, backtracking on the dual.

    Returns
    -------
    RakingWeights
        ``g`` is zero for unvalidated subjects.

    Raises
    ------
    RankDeficiencyError
        Auxiliaries are rank deficient on the validated subset.
    CalibrationFailure
        No convergence within ``max_iter`` steps, or some ``g`` above ``1e6``.
    """
    a_all = aux.design()
    if a_all.shape[0] != sample.n_subjects:
        raise DimensionError("auxiliary rows do not match the sample")
    idx = sample.validated
    a = a_all[idx]
    d = 1.0 / sample.pi[idx]
    k = a.shape[1]
    if np.linalg.matrix_rank(a) < k:
        raise RankDeficiencyError(f"auxiliary matrix has rank < {k} on the validated subset")
    total = a_all.sum(axis=0)
    tol = CALIB_TOL * (1.0 + np.max(np.abs(total)))

    # column scaling keeps the Newton system well conditioned
    scale = np.sqrt(np.mean(a * a, axis=0))
    scale[scale == 0] = 1.0
    a_s = a / scale
    t_s = total / scale

    lam = np.zeros(k)
    g = np.ones(a.shape[0])
    resid = (d * g) @ a - total
    it = 0
    while np.max(np.abs(resid)) >= tol:
        it += 1
        if it > max_iter:
            _fail("raking did not converge", resid)
        dg = d * g
        grad = dg @ a_s - t_s
        hess = (a_s * dg[:, None]).T @ a_s
        try:
            step = solve_spd(hess, grad)
        except SingularMatrixError:
            _fail("raking Jacobian is singular", resid)
        obj = dg.sum() - lam @ t_s
        slope = grad @ step
        # round-off slack so full Newton steps are kept near the solution
        slack = 1e-12 * (1.0 + abs(obj))
        t = 1.0
        for _ in range(60):
            new_lam = lam - t * step
            with np.errstate(over="ignore"):
                new_g = np.exp(a_s @ new_lam)
            new_obj = (d * new_g).sum() - new_lam @ t_s
            if np.isfinite(new_obj) and new_obj <= obj - 1e-4 * t * slope + slack:
                break
            t *= 0.5
        else:
            # dual cannot decrease further
            _fail("raking line search stalled", resid)
        lam, g = new_lam, new_g
        if g.max() > G_CAP:
            _fail(f"raking factor exceeded {G_CAP:g}", (d * g) @ a - total)
        resid = (d * g) @ a - total

    g_full = np.zeros(sample.n_subjects)
    g_full[idx] = g
    return RakingWeights(lam / scale, g_full, resid, it)


def _fail(message, resid):
    worst = int(np.argmax(np.abs(resid)))
    raise CalibrationFailure(
        f"{message}; worst constraint {worst} residual {resid[worst]:.3g}",
        worst_constraint=worst,
        residual=resid,
    )


def _validated_fit(cohort, sample, weights, init=None):
    idx, x, z, u, delta = cohort.validated_truth(sample)
    cov = cox_covariates(x, z)
    w = weights[idx]
    fit = fit_cox(cov, u, delta, w, init=init)
    return idx, cov, u, delta, w, fit


def sandwich_variance(cohort: Cohort, sample: TwoPhaseSample, fit: CoxFit, weights: np.ndarray,
                      aux: Optional[AuxiliaryMatrix] = None) -> np.ndarray:
    """Sandwich covariance of an HT or raked Cox estimate.

    With ``w`` the analysis weights and ``l`` the validated-data dfbetas of
    the weighted fit, each subject contributes
    ``h_i = A_i'gamma + R_i w_i (l_i - A_i'gamma)``, where ``gamma`` is the
    weighted least-squares fit of ``l`` on ``A`` over validated subjects.
    Without auxiliaries ``h_i = R_i w_i l_i``.  Returns ``sum_i h_i h_i'``.
    """
    if not fit.converged:
        raise StateError("sandwich variance requires a converged fit")
    idx, x, z, u, delta = cohort.validated_truth(sample)
    w = weights[idx]
    ell = dfbeta(fit, cox_covariates(x, z), u, delta, w).dfbeta
    if aux is None:
        h = w[:, None] * ell
        cov = h.T @ h
    else:
        a_all = aux.design()
        a = a_all[idx]
        sw = np.sqrt(w)
        gamma, *_ = np.linalg.lstsq(a * sw[:, None], ell * sw[:, None], rcond=None)
        h = a_all @ gamma
        h[idx] += w[:, None] * (ell - a @ gamma)
        cov = h.T @ h
    return 0.5 * (cov + cov.T)


def ht_estimate(cohort: Cohort, sample: TwoPhaseSample) -> RakingFit:
    """Inverse-probability weighted Cox fit on the validated subjects."""
    _check_sample(cohort, sample)
    weights = sample.design_weights
    _, _, _, _, _, fit = _validated_fit(cohort, sample, weights)
    if not fit.converged:
        raise StateError("HT Cox fit did not converge")
    cov = sandwich_variance(cohort, sample, fit, weights)
    return RakingFit(fit.beta, cov, weights, fit)


def raking_estimate(cohort: Cohort, sample: TwoPhaseSample, aux: AuxiliaryMatrix,
                    init=None) -> RakingFit:
    """Generalized raking estimate of the Cox coefficients.

    Parameters
    ----------
    init : array_like, optional
        Warm start for the Cox solve, typically the HT estimate.
    """
    _check_sample(cohort, sample)
    rw = solve_raking_weights(aux, sample)
    weights = rw.g / sample.pi
    _, _, _, _, _, fit = _validated_fit(cohort, sample, weights, init=init)
    if not fit.converged:
        raise StateError("raked Cox fit did not converge")
    cov = sandwich_variance(cohort, sample, fit, weights, aux)
    g_val = rw.g[sample.validated]
    return RakingFit(
        fit.beta, cov, weights, fit,
        lam=rw.lam, calib_residual=rw.calib_residual,
        g_range=(float(g_val.min()), float(g_val.max())),
    )


def naive_fit(cohort: Cohort) -> tuple:
    """Full-cohort Cox fit on the error-prone data and its covariates."""
    cov = cox_covariates(cohort.x, cohort.z)
    fit = fit_cox(cov, cohort.u_star, cohort.delta_star)
    if not fit.converged:
        raise StateError("naive Cox fit did not converge")
    return fit, cov


def build_auxiliary_naive(cohort: Cohort, intercept: bool = True) -> AuxiliaryMatrix:
    """Dfbetas of the full-cohort error-prone Cox fit."""
    fit, cov = naive_fit(cohort)
    infl = dfbeta(fit, cov, cohort.u_star, cohort.delta_star)
    return AuxiliaryMatrix(infl.dfbeta, "GRN", intercept)
