"""Phase-two validation sampling designs with exact inclusion probabilities."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .cohort import Cohort, DesignDescriptor, TwoPhaseSample
from .errors import DesignError, ParameterError
from .numeric import _as_generator

KINDS = ("SRS", "CC", "SCCB", "SCCN")


@dataclass(frozen=True)
class DesignSpec:
    """Phase-two design settings.

    Parameters
    ----------
    kind : {"SRS", "CC", "SCCB", "SCCN"}
    n_target : int, optional
        Validation sample size.  Case-control designs without a target
        sample ``cc_ratio`` controls per case.
    cc_ratio : float
    quantiles : tuple of float
        Stratification cutpoints as quantiles of the stratification variable.
    cutpoints : tuple of float, optional
        Absolute cutpoints; override ``quantiles`` when given.
    influence_column : int
        Column of the naive dfbetas driving Neyman allocation.
    """

    kind: str
    n_target: Optional[int] = None
    cc_ratio: float = 1.0
    quantiles: tuple = (0.2, 0.5, 0.8)
    cutpoints: Optional[tuple] = None
    influence_column: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ParameterError(f"unknown design kind {self.kind!r}; expected one of {KINDS}")
        if self.n_target is not None and self.n_target <= 0:
            raise ParameterError("n_target must be positive")
        if self.n_target is None and self.kind != "CC":
            raise ParameterError(f"{self.kind} design requires n_target")
        q = np.asarray(self.quantiles, dtype=float)
        if q.size and (np.any(q <= 0) or np.any(q >= 1) or np.any(np.diff(q) <= 0)):
            raise ParameterError("quantiles must be strictly increasing in (0, 1)")
        if self.cutpoints is not None and np.any(np.diff(self.cutpoints) <= 0):
            raise ParameterError("cutpoints must be strictly increasing")


def _sample_within(members, k, gen):
    if k == 0:
        return members[:0]
    return np.sort(gen.choice(members, size=k, replace=False))


def draw_srs(N: int, n: int, rng) -> TwoPhaseSample:
    """Simple random sample of ``n`` out of ``N`` without replacement."""
    if not 0 < n <= N:
        raise DesignError(f"need 0 < n <= N, got n={n}, N={N}")
    gen = _as_generator(rng)
    r = np.zeros(N, dtype=np.int8)
    r[_sample_within(np.arange(N), n, gen)] = 1
    return TwoPhaseSample(r, np.full(N, n / N), DesignDescriptor("SRS"))


def draw_case_control(delta_star, n_target: Optional[int], rng, cc_ratio: float = 1.0) -> TwoPhaseSample:
    """All error-prone cases plus a simple random sample of error-prone controls.

    Controls fill ``n_target`` or, without a target, number
    ``floor(cc_ratio * cases)`` capped at the available controls.
    """
    d = np.asarray(delta_star)
    N = d.shape[0]
    cases = np.flatnonzero(d == 1)
    controls = np.flatnonzero(d == 0)
    if cases.size == 0:
        raise DesignError("case-control design needs at least one error-prone case")
    if n_target is None:
        n_controls = int(np.floor(cc_ratio * cases.size))
    else:
        if cases.size > n_target:
            raise DesignError(f"{cases.size} error-prone cases exceed n_target={n_target}")
        if n_target > N:
            raise DesignError(f"n_target={n_target} exceeds cohort size {N}")
        n_controls = n_target - cases.size
    n_controls = min(n_controls, controls.size)
    if controls.size and n_controls == 0:
        raise DesignError("no controls would be sampled; control inclusion probability undefined")
    gen = _as_generator(rng)
    r = np.zeros(N, dtype=np.int8)
    r[cases] = 1
    r[_sample_within(controls, n_controls, gen)] = 1
    pi = np.ones(N)
    if controls.size:
        pi[controls] = n_controls / controls.size
    strata = d.astype(np.int64)
    desc = DesignDescriptor(
        "CC", strata, ("control", "case"),
        (int(controls.size), int(cases.size)), (int(n_controls), int(cases.size)),
    )
    return TwoPhaseSample(r, pi, desc)


def stratify(delta_star, strat_values, cutpoints):
    """Stratum label ``delta* * (len(cutpoints) + 1) + bin``; values on a cutpoint fall below it."""
    bins = np.searchsorted(np.asarray(cutpoints, dtype=float), np.asarray(strat_values, dtype=float), side="left")
    return np.asarray(delta_star).astype(np.int64) * (len(cutpoints) + 1) + bins


def allocate(sizes, n: int, shares, floor_one: bool = False):
    """Integer allocation of ``n`` across strata proportional to ``shares``.

    Strata whose share exceeds their size are taken whole and the surplus is
    spread over the other strata in proportion to their remaining room,
    repeatedly, before largest-remainder rounding (ties to the lower stratum
    index).  ``floor_one`` guarantees one draw in every nonempty stratum.

    Returns
    -------
    alloc : ndarray of int
    redistributed : bool
        Whether any stratum was exhausted.
    """
    sizes = np.asarray(sizes, dtype=np.int64)
    shares = np.where(sizes > 0, np.asarray(shares, dtype=float), 0.0)
    if n > sizes.sum():
        raise DesignError(f"n_target={n} exceeds the cohort size {sizes.sum()}")
    if not shares.sum() > 0:
        raise DesignError("allocation weights sum to zero")
    alloc = n * shares / shares.sum()
    full = np.zeros(sizes.size, dtype=bool)
    redistributed = False
    while True:
        over = ~full & (alloc > sizes + 1e-9)
        if not np.any(over):
            break
        redistributed = True
        surplus = np.sum(alloc[over] - sizes[over])
        full |= over
        alloc[over] = sizes[over]
        room = np.where(full, 0.0, np.clip(sizes - alloc, 0.0, None))
        if room.sum() <= 0:
            break
        alloc = alloc + surplus * room / room.sum()
    base = np.floor(alloc + 1e-9).astype(np.int64)
    base = np.minimum(base, sizes)
    left = n - base.sum()
    rem = np.where(base < sizes, alloc - base, -np.inf)
    order = np.argsort(-rem, kind="stable")
    for j in order[:left]:
        base[j] += 1
    if floor_one:
        for j in np.flatnonzero((sizes > 0) & (base == 0)):
            donor = int(np.argmax(np.where(base > 1, base, -1)))
            if base[donor] <= 1:
                raise DesignError("cannot give every nonempty stratum one draw")
            base[donor] -= 1
            base[j] += 1
    return base, redistributed


def _stratified(delta_star, strat_values, cutpoints, n_target, shares_fn, rng, kind, floor_one):
    d = np.asarray(delta_star)
    N = d.shape[0]
    if n_target > N:
        raise DesignError(f"n_target={n_target} exceeds cohort size {N}")
    n_bins = len(cutpoints) + 1
    n_strata = 2 * n_bins
    strata = stratify(d, strat_values, cutpoints)
    sizes = np.bincount(strata, minlength=n_strata)
    shares = shares_fn(strata, sizes)
    alloc, redistributed = allocate(sizes, n_target, shares, floor_one)
    empty = np.flatnonzero((sizes > 0) & (alloc == 0))
    if empty.size:
        raise DesignError(f"strata {empty.tolist()} received no draws; inclusion probability undefined")
    gen = _as_generator(rng)
    r = np.zeros(N, dtype=np.int8)
    pi = np.ones(N)
    for h in range(n_strata):
        members = np.flatnonzero(strata == h)
        if members.size == 0:
            continue
        r[_sample_within(members, int(alloc[h]), gen)] = 1
        pi[members] = alloc[h] / sizes[h]
    labels = tuple(f"d{h // n_bins}_x{h % n_bins}" for h in range(n_strata))
    warn = ("strata exhausted; allocation redistributed",) if redistributed else ()
    desc = DesignDescriptor(kind, strata, labels, tuple(int(s) for s in sizes),
                            tuple(int(a) for a in alloc), warn)
    return TwoPhaseSample(r, pi, desc)


def draw_scc_balanced(delta_star, strat_values, cutpoints, n_target: int, rng) -> TwoPhaseSample:
    """Equal allocation over the strata crossing ``delta*`` with binned ``strat_values``."""
    return _stratified(delta_star, strat_values, cutpoints, n_target,
                       lambda strata, sizes: np.ones(sizes.size), rng, "SCCB", False)


def draw_scc_neyman(delta_star, strat_values, cutpoints, influence_column, n_target: int, rng) -> TwoPhaseSample:
    """Allocation proportional to stratum size times within-stratum SD of ``influence_column``."""
    infl = np.asarray(influence_column, dtype=float)

    def shares(strata, sizes):
        sd = np.zeros(sizes.size)
        for h in np.flatnonzero(sizes > 1):
            sd[h] = np.std(infl[strata == h], ddof=1)
        return sizes * sd

    return _stratified(delta_star, strat_values, cutpoints, n_target, shares, rng, "SCCN", True)


def resolve_cutpoints(spec: DesignSpec, strat_values):
    if spec.cutpoints is not None:
        return tuple(float(c) for c in spec.cutpoints)
    return tuple(np.quantile(np.asarray(strat_values, dtype=float), spec.quantiles))


def draw_design(spec: DesignSpec, cohort: Cohort, rng, influence=None) -> TwoPhaseSample:
    """Draw a phase-two sample for ``cohort``; stratifies on the first error-prone covariate."""
    N = cohort.n_subjects
    if spec.kind == "SRS":
        return draw_srs(N, spec.n_target, rng)
    if spec.kind == "CC":
        return draw_case_control(cohort.delta_star, spec.n_target, rng, spec.cc_ratio)
    strat = cohort.x[:, 0]
    cuts = resolve_cutpoints(spec, strat)
    if spec.kind == "SCCB":
        return draw_scc_balanced(cohort.delta_star, strat, cuts, spec.n_target, rng)
    if influence is None:
        raise DesignError("Neyman allocation needs an influence column")
    column = np.asarray(influence)
    if column.ndim == 2:
        column = column[:, spec.influence_column]
    return draw_scc_neyman(cohort.delta_star, strat, cuts, column, spec.n_target, rng)


def realized_inclusion(kind: str, r, delta_star=None, strat_values=None, cutpoints=None) -> TwoPhaseSample:
    """Inclusion probabilities implied by a realized sample under a declared design.

    Used when a data file records who was validated but not ``pi``:
    within each design stratum ``pi`` is the sampled fraction.
    """
    if kind not in KINDS:
        raise ParameterError(f"unknown design kind {kind!r}; expected one of {KINDS}")
    r = np.asarray(r).astype(np.int8)
    N = r.shape[0]
    if kind == "SRS":
        strata = np.zeros(N, dtype=np.int64)
        labels = ("all",)
    elif kind == "CC":
        strata = np.asarray(delta_star).astype(np.int64)
        if np.any(r[strata == 1] == 0):
            raise DesignError("case-control design requires every error-prone case to be validated")
        labels = ("control", "case")
    else:
        strata = stratify(delta_star, strat_values, cutpoints)
        n_bins = len(cutpoints) + 1
        labels = tuple(f"d{h // n_bins}_x{h % n_bins}" for h in range(2 * n_bins))
    n_strata = len(labels)
    sizes = np.bincount(strata, minlength=n_strata)
    taken = np.bincount(strata, weights=r, minlength=n_strata).astype(np.int64)
    empty = np.flatnonzero((sizes > 0) & (taken == 0))
    if empty.size:
        raise DesignError(f"strata {[labels[h] for h in empty]} have no validated subjects")
    pi = (taken / np.where(sizes > 0, sizes, 1))[strata]
    desc = DesignDescriptor(kind, strata, labels, tuple(int(s) for s in sizes), tuple(int(t) for t in taken))
    return TwoPhaseSample(r, pi, desc)
