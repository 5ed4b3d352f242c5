"""Phase-one cohort, phase-two validation sample, and design matrices."""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations
from typing import Optional

import numpy as np

from .errors import DimensionError, MaskingError, ParameterError, SchemaError


def _as_matrix(a, n, name):
    a = np.asarray(a, dtype=float)
    if a.ndim == 1:
        a = a[:, None]
    if a.ndim != 2 or a.shape[0] != n:
        raise DimensionError(f"{name} must have {n} rows, got shape {a.shape}")
    return a


def _as_vector(a, n, name, dtype=float):
    a = np.asarray(a, dtype=dtype)
    if a.shape != (n,):
        raise DimensionError(f"{name} must have shape ({n},), got {a.shape}")
    return a


def _check_binary(a, name):
    ok = np.isnan(a) | (a == 0) | (a == 1)
    if not np.all(ok):
        raise ParameterError(f"{name} entries must be 0 or 1")


@dataclass(frozen=True, eq=False)
class Cohort:
    """Full phase-one cohort.

    Error-prone columns (``x``, ``z``, ``u_star``, ``delta_star``) are complete.
    The truth block (``x_true``, ``u_true``, ``delta_true``) holds NaN where a
    subject's true values are unknown; in simulation mode it is complete and
    only :meth:`validated_truth` gives estimators access to it.
    """

    x: np.ndarray
    z: np.ndarray
    u_star: np.ndarray
    delta_star: np.ndarray
    x_true: Optional[np.ndarray] = None
    u_true: Optional[np.ndarray] = None
    delta_true: Optional[np.ndarray] = None
    ids: Optional[np.ndarray] = None

    def __post_init__(self):
        n = np.asarray(self.u_star).shape[0]
        set_ = object.__setattr__
        set_(self, "x", _as_matrix(self.x, n, "x"))
        set_(self, "z", _as_matrix(self.z, n, "z"))
        set_(self, "u_star", _as_vector(self.u_star, n, "u_star"))
        set_(self, "delta_star", _as_vector(self.delta_star, n, "delta_star"))
        if self.x_true is not None:
            set_(self, "x_true", _as_matrix(self.x_true, n, "x_true"))
            if self.x_true.shape[1] != self.x.shape[1]:
                raise DimensionError("x_true and x must have the same number of columns")
        if self.u_true is not None:
            set_(self, "u_true", _as_vector(self.u_true, n, "u_true"))
        if self.delta_true is not None:
            set_(self, "delta_true", _as_vector(self.delta_true, n, "delta_true"))
        set_(self, "ids", np.arange(n) if self.ids is None else np.asarray(self.ids))
        for name in ("x", "z", "u_star", "delta_star"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ParameterError(f"error-prone column {name} must be complete and finite")
        if np.any(self.u_star < 0):
            raise ParameterError("u_star must be non-negative")
        _check_binary(self.delta_star, "delta_star")
        if self.u_true is not None and np.any(self.u_true[~np.isnan(self.u_true)] < 0):
            raise ParameterError("u_true must be non-negative")
        if self.delta_true is not None:
            _check_binary(self.delta_true, "delta_true")
        for arr in (self.x, self.z, self.u_star, self.delta_star, self.x_true, self.u_true, self.delta_true):
            if arr is not None:
                arr.setflags(write=False)

    @property
    def n_subjects(self) -> int:
        return self.u_star.shape[0]

    @property
    def p(self) -> int:
        return self.x.shape[1]

    @property
    def q(self) -> int:
        return self.z.shape[1]

    @property
    def has_truth(self) -> bool:
        return self.x_true is not None and self.u_true is not None and self.delta_true is not None

    def truth_available(self) -> np.ndarray:
        """Boolean mask of subjects whose full truth block is present."""
        if not self.has_truth:
            return np.zeros(self.n_subjects, dtype=bool)
        return (
            np.all(np.isfinite(self.x_true), axis=1)
            & np.isfinite(self.u_true)
            & np.isfinite(self.delta_true)
        )

    def validated_truth(self, sample: "TwoPhaseSample"):
        """Truth columns restricted to validated subjects.

        Returns
        -------
        idx : ndarray of int
            Indices of validated subjects.
        x, z, u, delta : ndarray
            True covariates, error-free covariates, time and event indicator.
        """
        if sample.n_subjects != self.n_subjects:
            raise DimensionError("sample and cohort sizes differ")
        idx = np.flatnonzero(sample.r == 1)
        missing = idx[~self.truth_available()[idx]]
        if missing.size:
            raise MaskingError(
                f"validated rows lack truth columns: {missing[:10].tolist()}"
                + (" ..." if missing.size > 10 else "")
            )
        return idx, self.x_true[idx], self.z[idx], self.u_true[idx], self.delta_true[idx]

    def full_truth(self):
        """All truth columns; only legal when every subject carries them."""
        if not np.all(self.truth_available()):
            raise MaskingError("full truth requested but some subjects are unvalidated")
        return self.x_true, self.z, self.u_true, self.delta_true

    def masked(self, sample: "TwoPhaseSample") -> "Cohort":
        """Copy with truth blanked (NaN) for subjects with ``r == 0``."""
        if not self.has_truth:
            return self
        keep = sample.r == 1
        x_true = np.where(keep[:, None], self.x_true, np.nan)
        u_true = np.where(keep, self.u_true, np.nan)
        delta_true = np.where(keep, self.delta_true, np.nan)
        return Cohort(self.x, self.z, self.u_star, self.delta_star, x_true, u_true, delta_true, self.ids)


@dataclass(frozen=True)
class DesignDescriptor:
    """How a phase-two sample was drawn."""

    kind: str
    strata: Optional[np.ndarray] = None
    stratum_labels: tuple = ()
    stratum_sizes: tuple = ()
    stratum_sampled: tuple = ()
    warnings: tuple = ()


@dataclass(frozen=True, eq=False)
class TwoPhaseSample:
    """Validation indicators ``r`` and inclusion probabilities ``pi``."""

    r: np.ndarray
    pi: np.ndarray
    design: DesignDescriptor = field(default_factory=lambda: DesignDescriptor("given"))

    def __post_init__(self):
        r = np.asarray(self.r)
        pi = np.asarray(self.pi, dtype=float)
        if r.ndim != 1 or pi.shape != r.shape:
            raise DimensionError("r and pi must be vectors of equal length")
        if not np.all((r == 0) | (r == 1)):
            raise ParameterError("r entries must be 0 or 1")
        r = r.astype(np.int8)
        bad = np.flatnonzero(~((pi > 0) & (pi <= 1)))
        if bad.size:
            raise ParameterError(
                f"inclusion probabilities must lie in (0, 1]; offending rows {bad[:10].tolist()}"
            )
        if np.any((pi == 1) & (r == 0)):
            raise ParameterError("subjects with pi = 1 must be sampled")
        r.setflags(write=False)
        pi.setflags(write=False)
        object.__setattr__(self, "r", r)
        object.__setattr__(self, "pi", pi)

    @property
    def n_subjects(self) -> int:
        return self.r.shape[0]

    @property
    def n_validated(self) -> int:
        return int(self.r.sum())

    @property
    def validated(self) -> np.ndarray:
        return np.flatnonzero(self.r == 1)

    @property
    def design_weights(self) -> np.ndarray:
        """``R_i / pi_i`` for every subject."""
        return self.r / self.pi

    @classmethod
    def census(cls, n: int) -> "TwoPhaseSample":
        return cls(np.ones(n, dtype=np.int8), np.ones(n), DesignDescriptor("census"))


@dataclass(frozen=True, eq=False)
class ImputedOverlay:
    """One multiply-imputed completion of the error-prone variables."""

    delta_hat: np.ndarray
    x_hat: Optional[np.ndarray] = None
    u_hat: Optional[np.ndarray] = None
    m_index: int = 0


# Canonical order of role groups in a design matrix.
_ROLE_GROUP = {
    "delta_star": 0, "delta_hat": 0, "delta": 0,
    "x_star": 1, "x_hat": 1, "x": 1,
    "u_star": 2, "u_hat": 2, "u": 2,
    "z": 3,
}


@dataclass(frozen=True)
class ModelSpec:
    """Working-model description for imputation or working regressions.

    Parameters
    ----------
    response : str
        ``"delta"``, ``"x"`` or ``"r_offset"`` (``U* - U``).
    predictors : tuple of str
        Roles from ``delta_star, delta_hat, x_star, x_hat, u_star, u_hat, z``.
    interactions : bool
        Add all pairwise products of the non-intercept main effects.
    weighted : bool
        Inverse-probability weight the fit.
    """

    response: str
    predictors: tuple
    interactions: bool = False
    weighted: bool = False

    def __post_init__(self):
        if self.response not in ("delta", "x", "r_offset"):
            raise SchemaError(f"unknown response role {self.response!r}")
        for role in self.predictors:
            if role not in _ROLE_GROUP or role in ("delta", "x", "u"):
                raise SchemaError(f"unknown predictor role {role!r}")
        ordered = tuple(sorted(self.predictors, key=lambda r: _ROLE_GROUP[r]))
        object.__setattr__(self, "predictors", ordered)


def _role_columns(cohort: Cohort, role: str, overlay: Optional[ImputedOverlay]):
    if role == "delta_star":
        return cohort.delta_star[:, None]
    if role == "x_star":
        return cohort.x
    if role == "u_star":
        return cohort.u_star[:, None]
    if role == "z":
        return cohort.z
    if overlay is None:
        raise SchemaError(f"role {role!r} requires an imputed overlay")
    value = {"delta_hat": overlay.delta_hat, "x_hat": overlay.x_hat, "u_hat": overlay.u_hat}[role]
    if value is None:
        raise SchemaError(f"overlay has no column for role {role!r}")
    value = np.asarray(value, dtype=float)
    return value[:, None] if value.ndim == 1 else value


def expand_design(main: np.ndarray, interactions: bool) -> np.ndarray:
    """Prepend an intercept and, optionally, append all pairwise products."""
    n = main.shape[0]
    cols = [np.ones((n, 1)), main]
    if interactions:
        k = main.shape[1]
        pairs = list(combinations(range(k), 2))
        if pairs:
            a = np.array([i for i, _ in pairs])
            b = np.array([j for _, j in pairs])
            cols.append(main[:, a] * main[:, b])
    return np.hstack(cols)


def build_design_matrix(cohort: Cohort, spec: ModelSpec, overlay: Optional[ImputedOverlay] = None):
    """Design matrix for ``spec`` over all ``N`` subjects.

    Columns are the intercept, then the Δ, X, U and Z roles in that order,
    then (if requested) the pairwise interactions in ``(i, j), i < j`` order.
    """
    main = np.hstack([_role_columns(cohort, role, overlay) for role in spec.predictors])
    return expand_design(main, spec.interactions)


def response_vector(cohort: Cohort, spec: ModelSpec, sample: TwoPhaseSample, column: int = 0):
    """Validated-subject responses for ``spec`` together with their indices."""
    idx, x, _, u, delta = cohort.validated_truth(sample)
    if spec.response == "delta":
        y = delta
    elif spec.response == "x":
        y = x[:, column]
    else:
        y = cohort.u_star[idx] - u
    return idx, y
