"""Multiple-imputation auxiliary variables for raking.

Three constructions are provided: imputing the event indicator only
(:func:`grmi_auxiliary`), chained imputation of the event indicator, the
covariate and the failure time (:func:`fcsmi_auxiliary`), and regression of the
true influence contributions on the imputed ones (:func:`if_calibration_auxiliary`).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.linalg

from .calibration import AuxiliaryMatrix, cox_covariates
from .cohort import Cohort, ImputedOverlay, ModelSpec, TwoPhaseSample, build_design_matrix, expand_design
from .cox import dfbeta, fit_cox
from .errors import ImputationError, ParameterError, RankDeficiencyError, SeparationWarning
from .numeric import _as_generator, expit

IRLS_TOL = 1e-10
IRLS_MAX_ITER = 100
SEPARATION_ETA = 30.0
RANK_TOL = 1e-10


@dataclass(frozen=True, eq=False)
class GlmFit:
    """Fitted logistic or linear regression.

    Attributes
    ----------
    kind : {"logistic", "linear"}
    coefficients : ndarray
    xtx_inverse : ndarray
        ``(V'WV)^{-1}`` with ``W`` the prior weights (identity if unweighted).
    chol_inverse : ndarray
        Upper-triangular ``R^{-1}`` with ``R^{-1} R^{-T} = xtx_inverse``.
    tau2_hat : float
        Residual mean square; working residuals for logistic fits.
    n_obs, n_params : int
    separated : bool
    """

    kind: str
    coefficients: np.ndarray
    xtx_inverse: np.ndarray
    chol_inverse: np.ndarray
    tau2_hat: float
    n_obs: int
    n_params: int
    weights: Optional[np.ndarray] = None
    separated: bool = False
    iterations: int = 0

    def predict(self, design) -> np.ndarray:
        eta = np.asarray(design) @ self.coefficients
        return expit(eta) if self.kind == "logistic" else eta


def _weighted_qr(design, weights):
    sw = np.sqrt(weights)
    q, r = np.linalg.qr(design * sw[:, None])
    diag = np.abs(np.diag(r))
    if diag.size == 0 or diag.min() <= RANK_TOL * max(diag.max(), 1.0):
        raise RankDeficiencyError("regression design is rank deficient")
    return q, r, sw


def _wls(design, y, weights):
    q, r, sw = _weighted_qr(design, weights)
    coef = scipy.linalg.solve_triangular(r, q.T @ (y * sw))
    return coef, r


def fit_glm(design, response, kind, ipw=None) -> GlmFit:
    """Fit a logistic (IRLS) or linear (least squares) regression.

    Parameters
    ----------
    design : array_like, shape (n, p)
        Rows with zero weight are ignored.
    response : array_like, shape (n,)
    kind : {"logistic", "linear"}
    ipw : array_like, shape (n,), optional
        Prior (inverse-probability) weights.

    Raises
    ------
    RankDeficiencyError
        The weighted design is not of full column rank.
    ParameterError
        ``n_obs <= n_params`` or an invalid response.
    """
    v = np.asarray(design, dtype=float)
    y = np.asarray(response, dtype=float)
    w = np.ones(v.shape[0]) if ipw is None else np.asarray(ipw, dtype=float)
    keep = w > 0
    v, y, w = v[keep], y[keep], w[keep]
    n, p = v.shape
    if n <= p:
        raise ParameterError(f"need more observations ({n}) than parameters ({p})")
    if kind == "linear":
        coef, r = _wls(v, y, w)
        res = y - v @ coef
        tau2 = float(np.sum(w * res * res) / (n - p))
        separated, it = False, 0
    elif kind == "logistic":
        if not np.all((y == 0) | (y == 1)):
            raise ParameterError("logistic response must be 0 or 1")
        coef, r, it = _irls(v, y, w)
        eta = v @ coef
        mu = expit(eta)
        separated = bool(np.max(np.abs(eta)) > SEPARATION_ETA)
        if separated:
            warnings.warn("logistic fit shows signs of separation", SeparationWarning, stacklevel=2)
        var = np.clip(mu * (1.0 - mu), 1e-300, None)
        work = (y - mu) / var
        tau2 = float(np.sum(w * work * work) / (n - p))
        # posterior draws use (V'WV)^{-1} with prior weights only
        _, r, _ = _weighted_qr(v, w)
    else:
        raise ParameterError(f"unknown GLM kind {kind!r}")
    r_inv = scipy.linalg.solve_triangular(r, np.eye(p))
    xtx_inv = r_inv @ r_inv.T
    return GlmFit(kind, coef, 0.5 * (xtx_inv + xtx_inv.T), r_inv, tau2, n, p,
                  None if ipw is None else w, separated, it)


def _irls(v, y, w):
    coef = np.zeros(v.shape[1])
    for it in range(1, IRLS_MAX_ITER + 1):
        eta = v @ coef
        mu = expit(eta)
        var = np.clip(mu * (1.0 - mu), 1e-10, None)
        new, r = _wls(v, eta + (y - mu) / var, w * var)
        delta = np.max(np.abs(new - coef))
        coef = new
        if delta < IRLS_TOL * (1.0 + np.max(np.abs(coef))):
            return coef, r, it
    return coef, r, IRLS_MAX_ITER


def posterior_draw(fit: GlmFit, rng, return_scale=False):
    """Approximate posterior draw of the regression coefficients.

    Draws ``tau2* = tau2_hat (n - p) / chi2(n - p)`` and then
    ``coef* ~ N(coef, tau2* xtx_inverse)``.

    Returns
    -------
    ndarray or (ndarray, float)
        The coefficient draw, with ``tau2*`` when ``return_scale`` is true.
    """
    if fit.n_obs <= fit.n_params:
        raise ParameterError("posterior draw needs n_obs > n_params")
    gen = _as_generator(rng)
    dof = fit.n_obs - fit.n_params
    if fit.tau2_hat == 0:
        coef, tau2 = fit.coefficients.copy(), 0.0
    else:
        tau2 = float(fit.tau2_hat * dof / gen.chisquare(dof))
        coef = fit.coefficients + np.sqrt(tau2) * (fit.chol_inverse @ gen.standard_normal(fit.n_params))
    return (coef, tau2) if return_scale else coef


@dataclass(eq=False)
class ImputationResult:
    """Averaged auxiliary matrix plus per-imputation overlays and dfbetas."""

    aux: AuxiliaryMatrix
    overlays: list = field(default_factory=list)
    dfbetas: list = field(default_factory=list)


def _impute_cox(cohort, overlay, init):
    x = cohort.x if overlay.x_hat is None else overlay.x_hat.reshape(cohort.n_subjects, -1)
    u = cohort.u_star if overlay.u_hat is None else overlay.u_hat
    cov = cox_covariates(x, cohort.z)
    fit = fit_cox(cov, u, overlay.delta_hat, init=init)
    if not fit.converged:
        raise ImputationError(f"Cox fit on imputation {overlay.m_index} did not converge")
    return fit, dfbeta(fit, cov, u, overlay.delta_hat, basis=f"imputed({overlay.m_index})").dfbeta


def _draw_binary(design, fit, gen):
    eta_star = posterior_draw(fit, gen)
    return (gen.random(design.shape[0]) < expit(design @ eta_star)).astype(float)


def grmi_auxiliary(cohort: Cohort, sample: TwoPhaseSample, M: int, interactions: bool, rng,
                   intercept: bool = True, weighted: bool = False) -> ImputationResult:
    """Auxiliaries from multiple imputation of the event indicator.

    A logistic model for the true event indicator given
    ``(1, delta*, X*, U*, Z)`` is fitted on the validated subjects.  For each
    imputation a coefficient vector is drawn, event indicators are imputed for
    every subject, the Cox model is refitted on the imputed full cohort and
    its dfbetas are averaged over imputations.

    Parameters
    ----------
    rng : RngStream
        Imputation ``m`` uses ``rng.child(m)``.
    """
    if M < 1:
        raise ParameterError("M must be at least 1")
    spec = ModelSpec("delta", ("delta_star", "x_star", "u_star", "z"), interactions, weighted)
    v = build_design_matrix(cohort, spec)
    idx, _, _, _, delta = cohort.validated_truth(sample)
    if np.unique(delta).size < 2:
        raise ImputationError("validated subjects must include both event classes")
    ipw = 1.0 / sample.pi[idx] if weighted else None
    fit = fit_glm(v[idx], delta, "logistic", ipw)

    result = ImputationResult(None)
    total = np.zeros((cohort.n_subjects, cohort.p + cohort.q))
    init = None
    for m in range(M):
        gen = rng.child(m).generator()
        delta_hat = _draw_binary(v, fit, gen)
        if delta_hat.sum() == 0:
            delta_hat = _draw_binary(v, fit, gen)
            if delta_hat.sum() == 0:
                raise ImputationError(f"imputation {m} produced no events twice")
        overlay = ImputedOverlay(delta_hat, m_index=m)
        cfit, infl = _impute_cox(cohort, overlay, init)
        init = cfit.beta
        total += infl
        result.overlays.append(overlay)
        result.dfbetas.append(infl)
    result.aux = AuxiliaryMatrix(total / M, "GRMI", intercept)
    return result


_FCS_VARS = {1: ("delta",), 2: ("delta", "u"), 3: ("delta", "u", "x")}


def _stack(*cols):
    return np.column_stack([np.asarray(c, dtype=float).reshape(len(c), -1) for c in cols])


def fcsmi_auxiliary(cohort: Cohort, sample: TwoPhaseSample, M: int, L: int, scenario_vars,
                    interactions: bool, rng, intercept: bool = True,
                    weighted: bool = False) -> ImputationResult:
    """Auxiliaries from chained (fully conditional) multiple imputation.

    Parameters
    ----------
    scenario_vars : int or tuple of str
        ``1``, ``2`` or ``3`` (imputing the event indicator; plus failure
        time; plus covariate), or an explicit subset of
        ``("delta", "u", "x")`` that includes ``"delta"``.
    L : int
        Chained-update rounds per imputation.

    Notes
    -----
    Validated subjects enter each refit with their true responses and the
    current imputed predictors.  Imputed failure times may be negative; such
    subjects are simply never at risk after their imputed time.
    """
    if M < 1 or L < 0:
        raise ParameterError("need M >= 1 and L >= 0")
    imputed = _FCS_VARS[scenario_vars] if isinstance(scenario_vars, int) else tuple(scenario_vars)
    if "delta" not in imputed or not set(imputed) <= {"delta", "u", "x"}:
        raise ParameterError(f"invalid FCS variable set {scenario_vars!r}")
    if cohort.p != 1:
        raise ParameterError("chained imputation supports a single error-prone covariate")
    do_x, do_u = "x" in imputed, "u" in imputed

    idx, x_true, _, u_true, delta = cohort.validated_truth(sample)
    if np.unique(delta).size < 2:
        raise ImputationError("validated subjects must include both event classes")
    ipw = 1.0 / sample.pi[idx] if weighted else None
    d_star = cohort.delta_star
    x_star = cohort.x[:, 0]
    u_star = cohort.u_star
    z = cohort.z
    x_val = x_true[:, 0]
    r_val = u_star[idx] - u_true
    n_all = cohort.n_subjects

    def design(*cols):
        return expand_design(_stack(*cols, z), interactions)

    v = design(d_star, x_star, u_star)
    v_no_u = design(d_star, x_star)
    fit_d0 = fit_glm(v[idx], delta, "logistic", ipw)
    fit_x0 = fit_glm(v[idx], x_val, "linear", ipw) if do_x else None
    fit_r0 = fit_glm(v_no_u[idx], r_val, "linear", ipw) if do_u else None

    def draw_linear(fit, dmat, gen):
        coef, tau2 = posterior_draw(fit, gen, return_scale=True)
        return dmat @ coef + np.sqrt(tau2) * gen.standard_normal(n_all)

    result = ImputationResult(None)
    total = np.zeros((n_all, cohort.p + cohort.q))
    init = None
    for m in range(M):
        gen = rng.child(m).generator()
        d_hat = _draw_binary(v, fit_d0, gen)
        x_hat = draw_linear(fit_x0, v, gen) if do_x else x_star
        u_hat = u_star - draw_linear(fit_r0, v_no_u, gen) if do_u else u_star
        for _ in range(L):
            vd = design(d_star, x_hat, u_hat)
            d_hat = _draw_binary(vd, fit_glm(vd[idx], delta, "logistic", ipw), gen)
            if do_x:
                vx = design(d_hat, x_star, u_hat)
                x_hat = draw_linear(fit_glm(vx[idx], x_val, "linear", ipw), vx, gen)
            if do_u:
                vu = design(d_hat, x_hat)
                u_hat = u_star - draw_linear(fit_glm(vu[idx], r_val, "linear", ipw), vu, gen)
        if d_hat.sum() == 0:
            raise ImputationError(f"imputation {m} produced no events")
        if do_u and np.all(u_hat <= 0):
            raise ImputationError(f"imputation {m} produced no positive failure times")
        overlay = ImputedOverlay(d_hat, x_hat[:, None] if do_x else None, u_hat if do_u else None, m)
        cfit, infl = _impute_cox(cohort, overlay, init)
        init = cfit.beta
        total += infl
        result.overlays.append(overlay)
        result.dfbetas.append(infl)
    result.aux = AuxiliaryMatrix(total / M, "GRFCSMI", intercept)
    return result


def true_influence(cohort: Cohort, sample: TwoPhaseSample):
    """Dfbetas of the inverse-probability weighted validated-data Cox fit."""
    idx, x, z, u, delta = cohort.validated_truth(sample)
    cov = cox_covariates(x, z)
    w = 1.0 / sample.pi[idx]
    fit = fit_cox(cov, u, delta, w)
    if not fit.converged:
        raise ImputationError("validated-data Cox fit did not converge")
    return idx, dfbeta(fit, cov, u, delta, w).dfbeta


def _greedy_full_rank(design, weights):
    """Drop columns (last first among offenders) until the weighted design has full rank."""
    keep = list(range(design.shape[1]))
    dropped = []
    sw = np.sqrt(weights)[:, None]
    while True:
        sub = design[:, keep] * sw
        if np.linalg.matrix_rank(sub) == len(keep):
            return keep, dropped
        for j in reversed(keep):
            trial = [c for c in keep if c != j]
            if np.linalg.matrix_rank(design[:, trial] * sw) == len(trial):
                keep, dropped = trial, dropped + [j]
                break
        else:
            dropped.append(keep.pop())


def if_calibration_auxiliary(cohort: Cohort, sample: TwoPhaseSample, base: ImputationResult,
                             intercept: bool = True):
    """Auxiliaries from working regressions of true on imputed influence contributions.

    For imputation ``m`` and coefficient ``j`` the validated true dfbeta is
    regressed, with inverse-probability weights, on
    ``(1, l, delta_hat, U_hat, X_hat, Z, l*delta_hat, l*U_hat, l*X_hat, l*Z)``
    where ``l`` is column ``j`` of the imputed dfbetas.  Fitted values for
    all subjects are averaged over imputations.

    Returns
    -------
    AuxiliaryMatrix, list
        The auxiliaries and a list of ``(m, j, dropped_columns)`` for working
        designs that needed columns removed to reach full rank.
    """
    idx, ell_true = true_influence(cohort, sample)
    w = 1.0 / sample.pi[idx]
    n_all, k = cohort.n_subjects, cohort.p + cohort.q
    total = np.zeros((n_all, k))
    report = []
    for overlay, ell_hat in zip(base.overlays, base.dfbetas):
        x_hat = cohort.x if overlay.x_hat is None else overlay.x_hat
        u_hat = cohort.u_star if overlay.u_hat is None else overlay.u_hat
        covs = _stack(overlay.delta_hat, u_hat, x_hat, cohort.z)
        for j in range(k):
            l_j = ell_hat[:, j:j + 1]
            dmat = np.column_stack([np.ones(n_all), l_j, covs, l_j * covs])
            keep, dropped = _greedy_full_rank(dmat[idx], w)
            if dropped:
                report.append((overlay.m_index, j, tuple(dropped)))
            coef, _ = _wls(dmat[idx][:, keep], ell_true[:, j], w)
            total[:, j] += dmat[:, keep] @ coef
    aux = AuxiliaryMatrix(total / len(base.overlays), "IF-imputed", intercept)
    return aux, report
