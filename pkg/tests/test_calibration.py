import math

import numpy as np
import pytest
import scipy.optimize
from numpy.testing import assert_allclose

from rakesurv.calibration import (
    AuxiliaryMatrix,
    build_auxiliary_naive,
    ht_estimate,
    raking_estimate,
    sandwich_variance,
    solve_raking_weights,
)
from rakesurv.cohort import Cohort, TwoPhaseSample
from rakesurv.cox import dfbeta, fit_cox
from rakesurv.errors import CalibrationFailure, MaskingError, RankDeficiencyError
from rakesurv.estimators import EstimationSettings, estimate_methods
from rakesurv.numeric import RngStream
from rakesurv.simulation import ScenarioConfig, simulate_cohort


def _instance(seed, N=200):
    rng = np.random.default_rng(seed)
    a = np.column_stack([rng.normal(size=N), rng.gamma(2.0, size=N)])
    pi = np.where(a[:, 1] > 2.0, 0.7, 0.35)
    r = (rng.random(N) < pi).astype(np.int8)
    return AuxiliaryMatrix(a), TwoPhaseSample(r, pi)


def _slsqp_raking(aux, sample):
    """Minimise sum_R d(g/pi, 1/pi) with d(w, d0) = w log(w/d0) - w + d0 under the calibration equations."""
    idx = sample.validated
    a = aux.design()[idx]
    d0 = 1.0 / sample.pi[idx]
    total = aux.totals
    obj = lambda g: np.sum(d0 * (g * np.log(g) - g + 1.0))
    jac = lambda g: d0 * np.log(g)
    cons = {"type": "eq", "fun": lambda g: (d0 * g) @ a - total, "jac": lambda g: (a * d0[:, None]).T}
    res = scipy.optimize.minimize(obj, np.ones(idx.size), jac=jac, constraints=[cons], method="SLSQP",
                                  bounds=[(1e-8, None)] * idx.size, options={"ftol": 1e-16, "maxiter": 1000})
    return res.x


@pytest.mark.parametrize("seed", range(20))
def test_raking_matches_constrained_minimizer(seed):
    aux, sample = _instance(seed)
    rw = solve_raking_weights(aux, sample)
    g_ref = _slsqp_raking(aux, sample)
    assert_allclose(rw.g[sample.validated], g_ref, atol=1e-6)
    assert np.all(rw.g[sample.r == 0] == 0)
    rel = np.max(np.abs(rw.calib_residual)) / (1 + np.max(np.abs(aux.totals)))
    assert rel < 1e-8


def test_raking_closed_form_single_intercept():
    # calibrating only the weight total rescales the HT weights by N / sum(1/pi)
    N = 50
    pi = np.full(N, 0.4)
    r = np.zeros(N, dtype=np.int8)
    r[:25] = 1
    aux = AuxiliaryMatrix(np.zeros((N, 0)))
    rw = solve_raking_weights(aux, TwoPhaseSample(r, pi))
    assert_allclose(rw.g[:25], N / (25 / 0.4), rtol=1e-12)


def test_raking_rank_and_infeasible():
    aux, sample = _instance(1)
    dup = AuxiliaryMatrix(np.column_stack([aux.a, aux.a[:, 0]]))
    with pytest.raises(RankDeficiencyError):
        solve_raking_weights(dup, sample)
    # a total outside the convex cone of validated rows is unreachable
    a = aux.a.copy()
    a[sample.r == 0, 1] = 1e3
    with pytest.raises(CalibrationFailure) as exc:
        solve_raking_weights(AuxiliaryMatrix(a), sample)
    assert exc.value.residual is not None


def _census_cohort():
    cfg = ScenarioConfig(N=400, n=400, scenario=1, censoring=0.5, methods=("True",))
    return simulate_cohort(cfg, 0)


def test_full_validation_collapse():
    cohort = _census_cohort()
    sample = TwoPhaseSample.census(cohort.n_subjects)
    x, z, u, d = cohort.full_truth()
    true = fit_cox(np.column_stack([x, z]), u, d)
    res = estimate_methods(cohort, sample, ("True", "HT", "GRN", "GRMIS", "GRFCSMIS"),
                           EstimationSettings(M=3, L=2, fcs_vars=1), RngStream(5).child(3))
    for m, r in res.items():
        assert r.ok, (m, r.error)
        assert_allclose(r.beta, true.beta, atol=1e-8, err_msg=m)


def test_sandwich_without_aux_is_weighted_dfbeta_outer_product(small_cohort, small_sample):
    fit = ht_estimate(small_cohort, small_sample)
    idx, x, z, u, d = small_cohort.validated_truth(small_sample)
    w = 1.0 / small_sample.pi[idx]
    ell = dfbeta(fit.fit, np.column_stack([x, z]), u, d, w).dfbeta
    h = w[:, None] * ell
    assert_allclose(fit.covariance, h.T @ h, rtol=1e-12)


def test_sandwich_with_perfect_auxiliary(small_cohort, small_sample):
    # auxiliaries that reproduce the influence exactly leave only the phase-one term
    fit = ht_estimate(small_cohort, small_sample)
    idx, x, z, u, d = small_cohort.validated_truth(small_sample)
    w = fit.weights[idx]
    ell = dfbeta(fit.fit, np.column_stack([x, z]), u, d, w).dfbeta
    a = np.zeros((small_cohort.n_subjects, 2))
    a[idx] = ell
    cov = sandwich_variance(small_cohort, small_sample, fit.fit, fit.weights, AuxiliaryMatrix(a, intercept=False))
    assert_allclose(cov, ell.T @ ell, rtol=1e-10)


def test_raking_estimate_calibrates_and_improves_fit(small_cohort, small_sample):
    aux = build_auxiliary_naive(small_cohort)
    rf = raking_estimate(small_cohort, small_sample, aux)
    idx = small_sample.validated
    assert_allclose(rf.weights[idx] @ aux.design()[idx], aux.totals, atol=1e-8 * (1 + np.abs(aux.totals).max()))
    assert rf.g_range[0] > 0
    assert np.all(np.linalg.eigvalsh(rf.covariance) > 0)


def test_masked_truth_not_reachable(small_cohort, small_sample):
    masked = small_cohort.masked(small_sample)
    r = np.ones(small_cohort.n_subjects, dtype=np.int8)
    with pytest.raises(MaskingError):
        ht_estimate(masked, TwoPhaseSample(r, np.ones(r.size)))
