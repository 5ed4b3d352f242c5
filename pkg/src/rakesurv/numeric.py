"""Seedable random streams and small dense SPD linear algebra."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import DimensionError, ParameterError, SingularMatrixError

MAX_CONDITION = 1e12
JITTER_SCALE = 1e-10


@dataclass(frozen=True)
class RngStream:
    """Deterministic random stream keyed by ``(seed, stream_id)``.

    Streams are derived with :class:`numpy.random.SeedSequence` spawn keys, so
    the variates a given key produces never depend on how many other streams
    were created or in which order.  Children extend the key path.

    Parameters
    ----------
    seed : int
        Master seed (64-bit).
    stream_id : int
        Replicate or sub-task index.
    path : tuple of int
        Further child indices below ``stream_id``.
    """

    seed: int
    stream_id: int = 0
    path: tuple = ()

    def __post_init__(self):
        if not 0 <= int(self.seed) < 2**64:
            raise ParameterError(f"seed must be a 64-bit unsigned integer, got {self.seed}")
        if not 0 <= int(self.stream_id) < 2**64:
            raise ParameterError(f"stream_id must be a 64-bit unsigned integer, got {self.stream_id}")

    def child(self, *index: int) -> "RngStream":
        return RngStream(self.seed, self.stream_id, self.path + tuple(int(i) for i in index))

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(
            entropy=int(self.seed), spawn_key=(int(self.stream_id),) + self.path
        )
        return np.random.Generator(np.random.PCG64(ss))


def _as_generator(rng) -> np.random.Generator:
    if isinstance(rng, RngStream):
        return rng.generator()
    if isinstance(rng, np.random.Generator):
        return rng
    raise TypeError(f"expected RngStream or numpy Generator, got {type(rng).__name__}")


def draw_bivariate_normal(mean, var, rho, rng, size=None):
    """Draw from a bivariate normal with given means, variances and correlation.

    Parameters
    ----------
    mean, var : array_like of length 2
    rho : float
        Correlation, ``|rho| < 1``.
    rng : RngStream or numpy.random.Generator
    size : int, optional
        Number of draws.  ``None`` returns a single 2-vector.

    Returns
    -------
    ndarray
        Shape ``(2,)`` or ``(size, 2)``.
    """
    mean = np.asarray(mean, dtype=float)
    var = np.asarray(var, dtype=float)
    if mean.shape != (2,) or var.shape != (2,):
        raise DimensionError("mean and var must both be length-2")
    if np.any(~np.isfinite(var)) or np.any(var <= 0):
        raise ParameterError(f"variances must be positive, got {var.tolist()}")
    if not np.isfinite(rho) or abs(rho) >= 1:
        raise ParameterError(f"|rho| must be < 1, got {rho}")
    gen = _as_generator(rng)
    n = 1 if size is None else int(size)
    e = gen.standard_normal((n, 2))
    sd = np.sqrt(var)
    first = e[:, 0]
    second = rho * e[:, 0] + np.sqrt(1.0 - rho * rho) * e[:, 1]
    out = np.column_stack([mean[0] + sd[0] * first, mean[1] + sd[1] * second])
    return out[0] if size is None else out


def draw_scaled_inverse_chisq(scale, dof, rng, size=None):
    """Draw ``scale * dof / chi2(dof)``."""
    if not np.isfinite(scale) or scale <= 0:
        raise ParameterError(f"scale must be positive, got {scale}")
    if int(dof) != dof or dof < 1:
        raise ParameterError(f"dof must be a positive integer, got {dof}")
    gen = _as_generator(rng)
    return scale * dof / gen.chisquare(dof, size=size)


def _check_square(a):
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionError(f"expected a square matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ParameterError("matrix has non-finite entries")
    return a


def cholesky_spd(a):
    """Lower Cholesky factor of a symmetric positive definite matrix.

    Raises :class:`SingularMatrixError` when the matrix is not positive
    definite or its condition number exceeds ``1e12``.  A single diagonal
    jitter of ``1e-10 * trace / dim`` is tried if the factorisation itself
    breaks down on an otherwise acceptable matrix.
    """
    a = _check_square(a)
    a = 0.5 * (a + a.T)
    eig = np.linalg.eigvalsh(a)
    lo, hi = eig[0], eig[-1]
    if hi <= 0 or lo <= 0 or hi / lo > MAX_CONDITION:
        raise SingularMatrixError(
            f"matrix is singular or ill-conditioned (min eigenvalue {lo:.3g}, max {hi:.3g})",
            min_eigenvalue=float(lo),
            matrix=a,
        )
    try:
        return np.linalg.cholesky(a)
    except np.linalg.LinAlgError:
        pass
    jitter = JITTER_SCALE * np.trace(a) / a.shape[0]
    try:
        return np.linalg.cholesky(a + jitter * np.eye(a.shape[0]))
    except np.linalg.LinAlgError:
        raise SingularMatrixError(
            "Cholesky failed after diagonal jitter", min_eigenvalue=float(lo), matrix=a
        ) from None


def _cho_solve(chol, b):
    return scipy.linalg.cho_solve((chol, True), b, check_finite=False)


def solve_spd(a, b):
    """Solve ``a x = b`` for symmetric positive definite ``a``."""
    chol = cholesky_spd(a)
    b = np.asarray(b, dtype=float)
    if b.shape[0] != chol.shape[0]:
        raise DimensionError(f"rhs has {b.shape[0]} rows, matrix is {chol.shape[0]}x{chol.shape[0]}")
    return _cho_solve(chol, b)


def invert_spd(a):
    """Inverse of a symmetric positive definite matrix (symmetrised)."""
    chol = cholesky_spd(a)
    inv = _cho_solve(chol, np.eye(chol.shape[0]))
    return 0.5 * (inv + inv.T)


def expit(x):
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out
