"""Cohort generators, error scenarios, replicated estimation and metrics."""

from __future__ import annotations

import functools
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.optimize

from .calibration import build_auxiliary_naive, cox_covariates
from .cohort import Cohort
from .cox import dfbeta, fit_cox
from .designs import DesignSpec, draw_design
from .errors import DimensionError, ParameterError
from .estimators import EstimationSettings, check_methods, estimate_methods
from .numeric import RngStream, _as_generator, draw_bivariate_normal, expit

# child indices of a replicate stream
GENERATION, ERROR, DESIGN, ESTIMATION = 0, 1, 2, 3
CENSORING_SEED = 20211019
CENSORING_DRAWS = 10**6
SIGMA2_ERR = 0.5
RHO_ERR = 0.5
Z_CRIT = 1.959963984540054
SCENARIO_CHANNELS = {0: (), 1: ("delta",), 2: ("delta", "u"), 3: ("delta", "u", "x")}
MISCLASS_MODELS = ("main", "design_compare", "interactions")


@dataclass(frozen=True)
class ScenarioConfig:
    """One simulation cell.

    Parameters
    ----------
    N, n : int
        Cohort and validation sizes.
    beta_x, beta_z : float
        True log hazard ratios.
    lambda0 : float
        Baseline hazard rate.
    censoring : float
        Target censoring rate in (0, 1).
    scenario : int
        0 (no error), 1 (event indicator), 2 (+ failure time), 3 (+ covariate).
    misclass_model : {"main", "design_compare", "interactions"}
    design : DesignSpec
    methods : tuple of str
    M, L : int
        Imputations and chained-update rounds.
    replicates : int
    seed : int
    intercept : bool
        Include the weight-total constraint in raking.
    """

    N: int = 2000
    n: int = 400
    beta_x: float = math.log(1.5)
    beta_z: float = math.log(0.5)
    lambda0: float = 0.1
    censoring: float = 0.5
    scenario: int = 1
    misclass_model: str = "main"
    design: DesignSpec = field(default_factory=lambda: DesignSpec("SRS", 400))
    methods: tuple = ("True", "HT", "GRN", "GRMIS")
    M: int = 10
    L: int = 50
    replicates: int = 500
    seed: int = CENSORING_SEED
    intercept: bool = True

    def __post_init__(self):
        if not 0 < self.censoring < 1:
            raise ParameterError("censoring rate must lie in (0, 1)")
        if self.n > self.N or self.n < 1:
            raise ParameterError("need 1 <= n <= N")
        if self.replicates < 1:
            raise ParameterError("replicates must be at least 1")
        if self.scenario not in SCENARIO_CHANNELS:
            raise ParameterError(f"scenario must be one of {sorted(SCENARIO_CHANNELS)}")
        if self.misclass_model not in MISCLASS_MODELS:
            raise ParameterError(f"misclass_model must be one of {MISCLASS_MODELS}")
        if self.lambda0 <= 0:
            raise ParameterError("lambda0 must be positive")
        check_methods(self.methods)

    @property
    def settings(self) -> EstimationSettings:
        return EstimationSettings(self.M, self.L, max(self.scenario, 1), self.intercept)


def _censoring_rate(theta, hazard):
    # P(C < T) for C ~ U(0, theta), T ~ Exp(hazard), averaged over covariates
    a = hazard * theta
    return float(np.mean(-np.expm1(-a) / a))


@functools.lru_cache(maxsize=64)
def _hazards(beta_x, beta_z, lambda0):
    xz = draw_bivariate_normal((0.0, 2.0), (1.0, 1.0), 0.5, RngStream(CENSORING_SEED, 0), CENSORING_DRAWS)
    return lambda0 * np.exp(beta_x * xz[:, 0] + beta_z * xz[:, 1])


@functools.lru_cache(maxsize=256)
def calibrate_censoring_bound(beta_x: float, beta_z: float, lambda0: float, target: float) -> float:
    """Upper bound of the uniform censoring distribution giving the target censoring rate.

    The censoring probability given covariates is available in closed form,
    so the rate is averaged over ``10**6`` fixed covariate draws and solved
    for by Brent's method on the log bound.
    """
    if not 0 < target < 1:
        raise ParameterError(f"target censoring rate must lie in (0, 1), got {target}")
    hazard = _hazards(float(beta_x), float(beta_z), float(lambda0))
    f = lambda log_theta: _censoring_rate(math.exp(log_theta), hazard) - target
    lo, hi = -30.0, 30.0
    if f(lo) < 0 or f(hi) > 0:
        raise ParameterError(f"censoring rate {target} is not reachable")
    return math.exp(scipy.optimize.brentq(f, lo, hi, xtol=1e-14, rtol=1e-14))


def generate_cohort(config: ScenarioConfig, rng, theta: float = None) -> Cohort:
    """Error-free cohort: exponential failure times with uniform censoring.

    The returned cohort carries the truth in both the error-prone and the
    truth columns; :func:`apply_error_scenario` replaces the former.
    """
    if theta is None:
        theta = calibrate_censoring_bound(config.beta_x, config.beta_z, config.lambda0, config.censoring)
    gen = _as_generator(rng)
    xz = draw_bivariate_normal((0.0, 2.0), (1.0, 1.0), 0.5, gen, config.N)
    x, z = xz[:, 0], xz[:, 1]
    rate = config.lambda0 * np.exp(config.beta_x * x + config.beta_z * z)
    t = gen.exponential(1.0 / rate)
    c = gen.uniform(0.0, theta, config.N)
    u = np.minimum(t, c)
    delta = (t <= c).astype(float)
    return Cohort(x, z, u, delta, x_true=x, u_true=u, delta_true=delta)


def _misclass_linear_predictor(model, beta_x, delta, x, u, z):
    if model == "main":
        return -1.1 + 3.0 * delta - 0.3 * x - 0.2 * u + 0.1 * z
    if model == "design_compare":
        intercept = -1.5 if abs(beta_x - math.log(3.0)) < 1e-8 else -1.0
        return intercept + 4.0 * delta + 0.5 * x - 0.5 * u - 0.5 * z
    return (-1.1 + 0.5 * delta - 0.25 * x - 0.1 * u + 0.2 * z
            + 0.85 * delta * x + 0.2 * delta * u + 0.8 * delta * z)


def apply_error_channels(cohort: Cohort, channels, misclass_model: str, rng, beta_x: float = 0.0) -> Cohort:
    """Replace the error-prone columns for the listed channels.

    All random inputs (misclassification uniforms and the correlated
    covariate/time errors) are drawn whatever the channels, so different
    channel sets share common random numbers.  Negative error-prone times
    are reflected across zero.
    """
    if misclass_model not in MISCLASS_MODELS:
        raise ParameterError(f"misclass_model must be one of {MISCLASS_MODELS}")
    x, z, u, delta = cohort.full_truth()
    x1, z1 = x[:, 0], z[:, 0]
    gen = _as_generator(rng)
    unif = gen.random(cohort.n_subjects)
    err = draw_bivariate_normal((0.0, 0.0), (SIGMA2_ERR, SIGMA2_ERR), RHO_ERR, gen, cohort.n_subjects)
    eps, nu = err[:, 0], err[:, 1]

    delta_star = delta
    if "delta" in channels:
        p = expit(_misclass_linear_predictor(misclass_model, beta_x, delta, x1, u, z1))
        delta_star = (unif < p).astype(float)
    u_star = u
    if "u" in channels:
        u_star = np.abs(u + 3.0 * math.sqrt(SIGMA2_ERR) - 0.2 * x1 - 1.05 * z1 + nu)
    x_star = x
    if "x" in channels:
        x_star = (0.2 + x1 - 0.1 * z1 - 0.4 * delta + 0.25 * u + eps)[:, None]
    return Cohort(x_star, z, u_star, delta_star, x, u, delta, cohort.ids)


def apply_error_scenario(cohort: Cohort, scenario: int, misclass_model: str, rng, beta_x: float = 0.0) -> Cohort:
    """Error scenario 1 (event indicator), 2 (+ failure time) or 3 (+ covariate); 0 leaves the truth."""
    if scenario not in SCENARIO_CHANNELS:
        raise ParameterError(f"scenario must be one of {sorted(SCENARIO_CHANNELS)}")
    return apply_error_channels(cohort, SCENARIO_CHANNELS[scenario], misclass_model, rng, beta_x)


def misclassification_metrics(delta_true, delta_star) -> dict:
    """Sensitivity, specificity, PPV and NPV; NaN where a denominator is zero."""
    d = np.asarray(delta_true)
    s = np.asarray(delta_star)
    if d.shape != s.shape:
        raise DimensionError("delta_true and delta_star lengths differ")
    tp = float(np.sum((d == 1) & (s == 1)))
    tn = float(np.sum((d == 0) & (s == 0)))
    fp = float(np.sum((d == 0) & (s == 1)))
    fn = float(np.sum((d == 1) & (s == 0)))

    def ratio(a, b):
        return a / b if b > 0 else float("nan")

    return {"sens": ratio(tp, tp + fn), "spec": ratio(tn, tn + fp),
            "ppv": ratio(tp, tp + fp), "npv": ratio(tn, tn + fn)}


def simulate_cohort(config: ScenarioConfig, replicate: int) -> Cohort:
    stream = RngStream(config.seed, replicate)
    truth = generate_cohort(config, stream.child(GENERATION))
    return apply_error_scenario(truth, config.scenario, config.misclass_model,
                                stream.child(ERROR), config.beta_x)


def simulate_replicate(config: ScenarioConfig, replicate: int):
    """Cohort, phase-two sample and naive auxiliaries (when the design needed them)."""
    stream = RngStream(config.seed, replicate)
    cohort = simulate_cohort(config, replicate)
    naive = build_auxiliary_naive(cohort, config.intercept) if config.design.kind == "SCCN" else None
    sample = draw_design(config.design, cohort, stream.child(DESIGN), None if naive is None else naive.a)
    return cohort, sample, naive


@dataclass(frozen=True)
class ReplicateRecord:
    """Per-method results of one replicate (first covariate and all coefficients)."""

    replicate: int
    method: str
    ok: bool
    beta: tuple = ()
    se: tuple = ()
    error: str = ""
    calib_residual: float = float("nan")
    warnings: tuple = ()


def run_replication(config: ScenarioConfig, replicate_index: int) -> list:
    """Generate, sample and estimate for one replicate; method failures are recorded.

    Warnings raised along the way (separation, redistributed strata) are
    attached to every record of the replicate.
    """
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        try:
            cohort, sample, naive = simulate_replicate(config, replicate_index)
        except Exception as exc:  # noqa: BLE001 - a broken replicate fails every method
            msg = f"{type(exc).__name__}: {exc}"
            return [ReplicateRecord(replicate_index, m, False, error=msg) for m in config.methods]
        stream = RngStream(config.seed, replicate_index).child(ESTIMATION)
        results = estimate_methods(cohort, sample, config.methods, config.settings, stream, naive)
    notes = tuple(sorted({f"{w.category.__name__}: {w.message}" for w in caught}
                         | set(sample.design.warnings)))
    records = []
    for m, res in results.items():
        if res.ok:
            records.append(ReplicateRecord(
                replicate_index, m, True, tuple(res.beta.tolist()), tuple(res.se.tolist()),
                calib_residual=float("nan") if res.calib_residual is None else res.calib_residual,
                warnings=notes,
            ))
        else:
            records.append(ReplicateRecord(replicate_index, m, False, error=res.error, warnings=notes))
    return records


def _run_chunk(config, indices):
    return [rec for r in indices for rec in run_replication(config, r)]


def run_simulation(config: ScenarioConfig, threads: int = 1, replicates: int = None) -> list:
    """Run all replicates, in parallel processes when ``threads > 1``.

    Records are sorted by replicate index, so output does not depend on
    scheduling or thread count.
    """
    n_rep = config.replicates if replicates is None else replicates
    calibrate_censoring_bound(config.beta_x, config.beta_z, config.lambda0, config.censoring)
    indices = list(range(n_rep))
    if threads <= 1 or n_rep == 1:
        records = _run_chunk(config, indices)
    else:
        chunks = [indices[i::threads] for i in range(threads)]
        with ProcessPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(_run_chunk, [config] * len(chunks), chunks))
        records = [rec for part in parts for rec in part]
    order = {m: i for i, m in enumerate(config.methods)}
    return sorted(records, key=lambda rec: (rec.replicate, order[rec.method]))


METRIC_FIELDS = ("pct_bias", "ese", "re", "ase", "mse", "cp", "type1", "fail_rate")


def aggregate_metrics(records, true_beta: float, column: int = 0, require_ht: bool = True) -> dict:
    """Summaries of the estimates of coefficient ``column`` per method.

    Returns
    -------
    dict
        Method to a dict with ``pct_bias`` (absolute bias when the true
        value is zero), ``ese`` (sample SD), ``re`` (HT ESE over method ESE),
        ``ase``, ``mse``, ``cp`` (Wald 95% coverage), ``type1`` (rejection
        rate of a zero coefficient, reported when the true value is zero),
        ``fail_rate``, ``n_ok`` and ``n_total``.
    """
    by_method = {}
    for rec in records:
        by_method.setdefault(rec.method, []).append(rec)
    out = {}
    for method, recs in by_method.items():
        ok = [r for r in recs if r.ok]
        b = np.array([r.beta[column] for r in ok])
        s = np.array([r.se[column] for r in ok])
        row = {"n_ok": len(ok), "n_total": len(recs), "fail_rate": 1.0 - len(ok) / len(recs)}
        if len(ok):
            mean = b.mean()
            row["pct_bias"] = (mean - true_beta) if true_beta == 0 else 100.0 * (mean - true_beta) / true_beta
            row["ese"] = float(np.std(b, ddof=1)) if len(ok) >= 2 else float("nan")
            row["ase"] = float(s.mean())
            row["mse"] = float(np.mean((b - true_beta) ** 2))
            row["cp"] = float(np.mean(np.abs(b - true_beta) <= Z_CRIT * s))
            row["type1"] = float(np.mean(np.abs(b) > Z_CRIT * s)) if true_beta == 0 else float("nan")
        else:
            for k in ("pct_bias", "ese", "ase", "mse", "cp", "type1"):
                row[k] = float("nan")
        out[method] = row
    if "HT" in out:
        ht_ese = out["HT"]["ese"]
        for row in out.values():
            row["re"] = ht_ese / row["ese"] if row["ese"] > 0 else float("nan")
    elif require_ht:
        raise ParameterError("relative efficiency needs HT among the methods")
    else:
        for row in out.values():
            row["re"] = float("nan")
    return out


CHANNEL_SETS = (("x_only", ("x",)), ("u_only", ("u",)), ("delta_only", ("delta",)),
                ("all", ("delta", "u", "x")))


def export_influence_pairs(config: ScenarioConfig, rng, channel_sets=CHANNEL_SETS) -> list:
    """True-data dfbetas paired with error-prone dfbetas, per error channel set.

    Returns
    -------
    list of tuple
        ``(channel, subject, coefficient, true_value, error_prone_value)``.
    """
    stream = rng if isinstance(rng, RngStream) else RngStream(int(rng))
    truth = generate_cohort(config, stream.child(GENERATION))
    x, z, u, delta = truth.full_truth()
    cov = cox_covariates(x, z)
    fit = fit_cox(cov, u, delta)
    true_infl = dfbeta(fit, cov, u, delta).dfbeta
    rows = []
    for name, channels in channel_sets:
        noisy = apply_error_channels(truth, channels, config.misclass_model, stream.child(ERROR), config.beta_x)
        star = build_auxiliary_naive(noisy, intercept=False).a
        for j in range(star.shape[1]):
            for i in range(truth.n_subjects):
                rows.append((name, i, j, float(true_infl[i, j]), float(star[i, j])))
    return rows


def pairs_r_squared(rows, channel, coefficient=0) -> float:
    """Squared correlation of the pairs for one channel set and coefficient."""
    t = np.array([r[3] for r in rows if r[0] == channel and r[2] == coefficient])
    s = np.array([r[4] for r in rows if r[0] == channel and r[2] == coefficient])
    return float(np.corrcoef(t, s)[0, 1] ** 2)


def with_overrides(config: ScenarioConfig, **kwargs) -> ScenarioConfig:
    return replace(config, **kwargs)
