import math

import numpy as np
import pytest

from rakesurv.cohort import Cohort, TwoPhaseSample
from rakesurv.designs import draw_srs
from rakesurv.numeric import RngStream
from rakesurv.simulation import ScenarioConfig, simulate_cohort


def brute_loglik(beta, x, time, event, w):
    """Breslow partial log-likelihood by explicit risk-set loops."""
    eta = x @ beta
    total = 0.0
    for i in range(len(time)):
        if event[i] and w[i] > 0:
            at_risk = time >= time[i]
            total += w[i] * (eta[i] - math.log(np.sum(w[at_risk] * np.exp(eta[at_risk]))))
    return total


def brute_score(beta, x, time, event, w):
    eta = x @ beta
    g = np.zeros(x.shape[1])
    for i in range(len(time)):
        if event[i] and w[i] > 0:
            at_risk = time >= time[i]
            e = w[at_risk] * np.exp(eta[at_risk])
            g += w[i] * (x[i] - e @ x[at_risk] / e.sum())
    return g


def random_survival(rng, n, k=2, ties=False, weights=False):
    x = rng.normal(size=(n, k))
    t = rng.exponential(np.exp(-0.5 * x[:, 0]))
    if ties:
        t = np.ceil(t * 4) / 4
    c = rng.exponential(2.0, size=n)
    time = np.minimum(t, c)
    event = (t <= c).astype(float)
    if event.sum() < 3:
        event[:3] = 1.0
    w = rng.uniform(0.5, 3.0, size=n) if weights else np.ones(n)
    return x, time, event, w


@pytest.fixture(scope="session")
def small_config():
    return ScenarioConfig(N=600, n=200, beta_x=math.log(1.5), censoring=0.5, scenario=3,
                          methods=("HT", "GRN", "GRMIS"), replicates=3)


@pytest.fixture(scope="session")
def small_cohort(small_config):
    return simulate_cohort(small_config, 0)


@pytest.fixture(scope="session")
def small_sample(small_cohort):
    return draw_srs(small_cohort.n_subjects, 200, RngStream(7).generator())


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
