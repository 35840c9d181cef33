"""Gaussian variational factors for fixed effects under linear equality constraints.

For a Gaussian surrogate likelihood with precision ``XtX`` and linear term
``Xtv``, constrained to ``L @ gamma = 0``, the optimal factor is a singular
Gaussian.  :func:`update_dense` handles any full-rank ``L``; :func:`update_fast`
is the O(p) route for one-hot designs with a single sum-to-zero constraint.

Log pseudo-determinants follow the identity
``ln|Lambda|+ = ln|L L'| - ln|XtX| - ln|L XtX^-1 L'|``.  For the sum-to-zero
constraint ``ln|L L'| = ln p``; :func:`uncorrected_log_pdet` returns the
value without that term.
"""
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy import linalg

from .errors import NumericalError


@dataclass(frozen=True, eq=False)
class ConstrainedGaussianDense:
    mean: np.ndarray
    cov: np.ndarray
    log_pdet: float
    constraint: np.ndarray


@dataclass(frozen=True, eq=False)
class ConstrainedGaussianFast:
    """Sum-to-zero constrained factor stored as O(p) vectors; off-diagonal covariance is implicit."""
    d: np.ndarray
    u: np.ndarray
    mean: np.ndarray
    var: np.ndarray
    log_pdet: float
    level_names: Optional[Tuple[str, ...]] = None

    @property
    def size(self) -> int:
        return len(self.d)


def _logdet_pd(matrix: np.ndarray, what: str) -> Tuple[np.ndarray, float]:
    try:
        factor = linalg.cho_factor(matrix, lower=True)
    except linalg.LinAlgError:
        raise NumericalError(f"{what} is singular or not positive definite")
    return factor, 2.0 * float(np.sum(np.log(np.diag(factor[0]))))


def update_dense(XtX: np.ndarray, Xtv: np.ndarray, L: np.ndarray) -> ConstrainedGaussianDense:
    """Reference solver for an arbitrary full-row-rank constraint matrix ``L``."""
    XtX = np.asarray(XtX, dtype=float)
    Xtv = np.asarray(Xtv, dtype=float)
    L = np.atleast_2d(np.asarray(L, dtype=float))
    p = XtX.shape[0]
    if L.shape[1] != p:
        raise ValueError(f"constraint has {L.shape[1]} columns, expected {p}")
    if np.linalg.matrix_rank(L) < L.shape[0]:
        raise NumericalError("constraint matrix is not of full row rank")

    factor, logdet_xtx = _logdet_pd(XtX, "XtX")
    A = linalg.cho_solve(factor, np.eye(p))
    gamma_ols = A @ Xtv
    AL = A @ L.T
    M = L @ AL
    m_factor, logdet_m = _logdet_pd(M, "L XtX^-1 L'")
    _, logdet_llt = _logdet_pd(L @ L.T, "L L'")

    correction = AL @ linalg.cho_solve(m_factor, L @ gamma_ols)
    mean = gamma_ols - correction
    cov = A - AL @ linalg.cho_solve(m_factor, AL.T)
    cov = 0.5 * (cov + cov.T)
    return ConstrainedGaussianDense(
        mean=mean, cov=cov, log_pdet=logdet_llt - logdet_xtx - logdet_m, constraint=L
    )


def update_fast(d: np.ndarray, Xtv: np.ndarray, level_names: Optional[Sequence[str]] = None) -> ConstrainedGaussianFast:
    """Closed-form factor for a one-hot design with ``1' gamma = 0``.

    ``d`` is the diagonal of ``XtX`` (per-level counts or summed weights).
    """
    d = np.asarray(d, dtype=float)
    Xtv = np.asarray(Xtv, dtype=float)
    if d.shape != Xtv.shape:
        raise ValueError(f"d has shape {d.shape} but Xtv has shape {Xtv.shape}")
    empty = np.flatnonzero(~(d > 0))
    if len(empty):
        level = level_names[empty[0]] if level_names is not None else int(empty[0])
        raise NumericalError(f"fixed-effect level {level!r} has no observations")

    u = 1.0 / d
    gamma_ols = u * Xtv
    total_u = u.sum()
    mean = gamma_ols - u * (gamma_ols.sum() / total_u)
    var = u - u * u / total_u
    log_pdet = float(np.log(len(d)) + np.log(u).sum() - np.log(total_u))
    return ConstrainedGaussianFast(
        d=d, u=u, mean=mean, var=var, log_pdet=log_pdet,
        level_names=tuple(level_names) if level_names is not None else None,
    )


def uncorrected_log_pdet(u: np.ndarray) -> float:
    """``sum(ln u) - ln(sum u)``: the pseudo-determinant without the ``ln p`` term."""
    u = np.asarray(u, dtype=float)
    return float(np.log(u).sum() - np.log(u.sum()))


def fe_row_moments(fast: ConstrainedGaussianFast, level: int) -> Tuple[float, float]:
    """Mean and variance of ``x_i' gamma`` for a one-hot row selecting ``level``."""
    if not 0 <= level < fast.size:
        raise IndexError(f"fixed-effect level {level} out of range [0, {fast.size})")
    return float(fast.mean[level]), float(fast.var[level])
