import warnings

import numpy as np
import pytest
import scipy.optimize
from numpy.testing import assert_allclose

from rakesurv.errors import ParameterError, RankDeficiencyError, SeparationWarning
from rakesurv.imputation import (
    _greedy_full_rank,
    fcsmi_auxiliary,
    fit_glm,
    grmi_auxiliary,
    if_calibration_auxiliary,
    posterior_draw,
)
from rakesurv.numeric import RngStream, expit


def _logistic_data(seed, n=300):
    rng = np.random.default_rng(seed)
    v = np.column_stack([np.ones(n), rng.normal(size=(n, 2))])
    y = (rng.random(n) < expit(v @ [-0.3, 1.0, -0.7])).astype(float)
    return v, y, rng.uniform(1, 4, n)


@pytest.mark.parametrize("weighted", [False, True])
def test_irls_matches_direct_maximisation(weighted):
    v, y, w = _logistic_data(0)
    w = w if weighted else np.ones_like(y)

    def nll(b):
        eta = v @ b
        return -np.sum(w * (y * eta - np.logaddexp(0, eta)))

    ref = scipy.optimize.minimize(nll, np.zeros(3), jac=lambda b: -(w * (y - expit(v @ b))) @ v,
                                  method="BFGS", options={"gtol": 1e-12}).x
    fit = fit_glm(v, y, "logistic", w if weighted else None)
    assert_allclose(fit.coefficients, ref, atol=1e-7)
    # xtx_inverse carries prior weights only
    assert_allclose(fit.xtx_inverse, np.linalg.inv((v * w[:, None]).T @ v), rtol=1e-10)
    assert_allclose(fit.chol_inverse @ fit.chol_inverse.T, fit.xtx_inverse, rtol=1e-10)
    mu = expit(v @ fit.coefficients)
    work = (y - mu) / (mu * (1 - mu))
    assert_allclose(fit.tau2_hat, np.sum(w * work ** 2) / (len(y) - 3), rtol=1e-8)


def test_linear_fit_matches_lstsq():
    v, _, w = _logistic_data(1)
    y = v @ [1.0, 2.0, -1.0] + np.random.default_rng(2).normal(size=len(w))
    fit = fit_glm(v, y, "linear", w)
    sw = np.sqrt(w)
    ref = np.linalg.lstsq(v * sw[:, None], y * sw, rcond=None)[0]
    assert_allclose(fit.coefficients, ref, rtol=1e-10)
    res = y - v @ ref
    assert_allclose(fit.tau2_hat, np.sum(w * res ** 2) / (len(y) - 3), rtol=1e-10)


def test_glm_errors_and_separation():
    v = np.column_stack([np.ones(6), np.arange(6.0)])
    with pytest.raises(RankDeficiencyError):
        fit_glm(np.column_stack([v, v[:, 1]]), np.arange(6.0), "linear")
    with pytest.raises(ParameterError):
        fit_glm(v[:2], [0.0, 1.0], "linear")
    with pytest.raises(ParameterError):
        fit_glm(v, [0, 1, 2, 0, 1, 0], "logistic")
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        fit = fit_glm(v, [0, 0, 0, 1, 1, 1], "logistic")
    assert fit.separated
    assert any(issubclass(w.category, SeparationWarning) for w in caught)


def test_posterior_draw_moments():
    v, y, _ = _logistic_data(3)
    fit = fit_glm(v, y, "linear")
    draws = np.array([posterior_draw(fit, RngStream(9, i)) for i in range(4000)])
    dof = fit.n_obs - fit.n_params
    expected = fit.tau2_hat * dof / (dof - 2) * fit.xtx_inverse
    assert_allclose(draws.mean(axis=0), fit.coefficients, atol=4 * np.sqrt(np.diag(expected) / 4000).max())
    assert_allclose(np.cov(draws.T), expected, rtol=0.1, atol=1e-4)
    zero = fit_glm(v, v @ [1.0, 2.0, 3.0], "linear")
    if zero.tau2_hat == 0:
        assert_allclose(posterior_draw(zero, RngStream(1)), zero.coefficients)


def test_grmi_deterministic_and_averaged(small_cohort, small_sample):
    a = grmi_auxiliary(small_cohort, small_sample, 3, False, RngStream(4))
    b = grmi_auxiliary(small_cohort, small_sample, 3, False, RngStream(4))
    assert_allclose(a.aux.a, b.aux.a, rtol=0)
    assert len(a.overlays) == 3
    assert_allclose(a.aux.a, np.mean(a.dfbetas, axis=0), rtol=1e-12)
    # imputed indicators cover every subject
    assert a.overlays[0].delta_hat.shape == (small_cohort.n_subjects,)


def test_fcs_variable_sets(small_cohort, small_sample):
    res = fcsmi_auxiliary(small_cohort, small_sample, 2, 3, 1, False, RngStream(5))
    assert res.overlays[0].x_hat is None and res.overlays[0].u_hat is None
    res = fcsmi_auxiliary(small_cohort, small_sample, 2, 3, ("delta", "u", "x"), True, RngStream(5))
    assert res.overlays[0].x_hat.shape == (small_cohort.n_subjects, 1)
    assert res.aux.a.shape == (small_cohort.n_subjects, 2)
    with pytest.raises(ParameterError):
        fcsmi_auxiliary(small_cohort, small_sample, 2, 3, ("u",), False, RngStream(5))


def test_if_auxiliary_shape_and_rank_report(small_cohort, small_sample):
    base = grmi_auxiliary(small_cohort, small_sample, 2, False, RngStream(6))
    aux, report = if_calibration_auxiliary(small_cohort, small_sample, base)
    assert aux.a.shape == (small_cohort.n_subjects, 2)
    assert np.all(np.isfinite(aux.a))
    assert isinstance(report, list)


def test_greedy_full_rank_drops_duplicate():
    rng = np.random.default_rng(0)
    d = rng.normal(size=(30, 3))
    d = np.column_stack([d, d[:, 1]])
    keep, dropped = _greedy_full_rank(d, np.ones(30))
    assert dropped == [3] and keep == [0, 1, 2]
