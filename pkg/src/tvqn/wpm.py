"""Weighted proximal mappings onto box constraints.

The metric is W = tau*I +/- U U^T (diagonal plus low rank).  For the box
indicator, the W-weighted projection reduces to a plain componentwise
clamp shifted by a low-rank correction; the r-dimensional correction
coefficients solve a piecewise-linear system handled by a semi-smooth
Newton iteration.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

log = logging.getLogger(__name__)

# Levenberg damping factor applied when a generalized-Jacobian solve fails.
_DAMPING = 1e-8


@dataclass(frozen=True, eq=False)
class DiagPlusLowRank:
    """Metric W = tau*I +/- U U^T with tau > 0 and U of shape (N, r).

    The object is immutable; the Cholesky factor of the r x r capacitance
    matrix used by the Woodbury inverse is computed once at construction.
    For the minus sign the construction fails unless W stays positive
    definite.
    """

    tau: float
    U: np.ndarray
    sign: int = 1
    _chol: object = field(init=False, repr=False, default=None, compare=False)

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if self.sign not in (1, -1):
            raise ValueError(f"sign must be +1 or -1, got {self.sign}")
        u = np.asarray(self.U, dtype=float)
        if u.ndim == 1:
            u = u[:, None] if u.size else u.reshape(0, 0)
        if u.ndim != 2:
            raise ValueError("U must be a 2-D array of shape (N, r)")
        object.__setattr__(self, "U", u)
        if self.rank:
            cap = np.eye(self.rank) + self.sign * (u.T @ u) / self.tau
            try:
                chol = scipy.linalg.cho_factor(cap)
            except np.linalg.LinAlgError as exc:
                raise ValueError("metric is not positive definite") from exc
            object.__setattr__(self, "_chol", chol)

    @classmethod
    def diagonal(cls, tau, n=0):
        """Pure diagonal metric tau*I (rank-0 low-rank part)."""
        return cls(tau=tau, U=np.zeros((n, 0)))

    @property
    def rank(self):
        return self.U.shape[1]

    @property
    def dim(self):
        return self.U.shape[0]

    def dense(self, n=None):
        """Materialize W as a dense matrix (tests and small problems only)."""
        if n is None:
            n = self.dim
        w = self.tau * np.eye(n)
        if self.rank:
            w += self.sign * (self.U @ self.U.T)
        return w


def apply_metric(w, x):
    """Apply W to a vector: tau*x +/- U (U^T x)."""
    x = np.asarray(x, dtype=float)
    out = w.tau * x
    if w.rank:
        if x.shape[0] != w.dim:
            raise ValueError(f"dimension mismatch: metric is {w.dim}, vector is {x.shape[0]}")
        out = out + w.sign * (w.U @ (w.U.T @ x))
    return out


def apply_metric_inverse(w, x):
    """Apply W^{-1} via the Woodbury identity.

    W^{-1} x = x/tau -/+ U (I_r +/- U^T U / tau)^{-1} U^T x / tau^2, with the
    r x r system solved through the cached Cholesky factorization.
    """
    x = np.asarray(x, dtype=float)
    out = x / w.tau
    if w.rank:
        if x.shape[0] != w.dim:
            raise ValueError(f"dimension mismatch: metric is {w.dim}, vector is {x.shape[0]}")
        rhs = w.U.T @ x
        coef = scipy.linalg.cho_solve(w._chol, rhs)
        out = out - w.sign * (w.U @ coef) / (w.tau**2)
    return out


@dataclass(frozen=True, eq=False)
class BoxSet:
    """Componentwise box constraints, defaulting to the nonnegative orthant."""

    lower: object = 0.0
    upper: object = np.inf

    def __post_init__(self):
        lo = np.asarray(self.lower, dtype=float)
        hi = np.asarray(self.upper, dtype=float)
        if np.any(lo > hi):
            raise ValueError("box lower bounds exceed upper bounds")
        object.__setattr__(self, "lower", lo if lo.ndim else float(lo))
        object.__setattr__(self, "upper", hi if hi.ndim else float(hi))

    @classmethod
    def nonnegative(cls):
        return cls(0.0, np.inf)

    @classmethod
    def unbounded(cls):
        return cls(-np.inf, np.inf)

    def is_unbounded(self):
        return np.all(np.isneginf(self.lower)) and np.all(np.isposinf(self.upper))


def prox_box_diag(x, box):
    """Projection onto the box: the componentwise clamp.

    For any positive diagonal metric the weighted projection coincides with
    the unweighted one because the objective separates per component.
    """
    return np.clip(np.asarray(x, dtype=float), box.lower, box.upper)


def _shift_point(beta, x, w):
    # argument of the clamp in the structured-WPM formula: x -/+ U beta / tau
    return x - w.sign * (w.U @ beta) / w.tau


def phi(beta, x, w, box):
    """Residual of the low-rank correction system.

    phi(beta) = U^T (x - clamp(x -/+ U beta / tau)) + beta; its root gives
    the correction that turns the diagonal prox into the W-weighted one.
    """
    beta = np.asarray(beta, dtype=float)
    z = _shift_point(beta, x, w)
    return w.U.T @ (x - prox_box_diag(z, box)) + beta


def _newton_matrix(z, w, box):
    # element of the generalized Jacobian: I_r +/- U_A^T U_A / tau where the
    # active rows are the components strictly inside the box (ties count as
    # outside, so the clamp derivative there is taken to be zero)
    inside = (z > box.lower) & (z < box.upper)
    ua = w.U[inside]
    return np.eye(w.rank) + w.sign * (ua.T @ ua) / w.tau


def semismooth_newton(x, w, box, beta0=None, eps=1e-6, max_iter=50, full_output=False):
    """Solve phi(beta) = 0 by a semi-smooth Newton iteration.

    Parameters
    ----------
    x : ndarray
        Point at which the weighted projection is evaluated.
    w : DiagPlusLowRank
        Metric; its rank r must be at least 1.
    box : BoxSet
        Constraint set.
    beta0 : ndarray, optional
        Starting point (default: zeros).  Warm starts from a previous
        outer iteration typically halve the iteration count.
    eps : float
        Residual tolerance on ||phi(beta)||_2.
    max_iter : int
        Iteration cap; on hitting it the best-residual iterate is returned
        and a warning is logged (non-fatal: callers tolerate an inexact
        prox).
    full_output : bool
        If true, also return a dict with keys ``iterations``, ``residual``
        and ``converged``.

    Returns
    -------
    beta : ndarray
        Root approximation, or (beta, info) when ``full_output`` is set.
    """
    if w.rank < 1:
        raise ValueError("semismooth_newton requires a rank >= 1 metric")
    x = np.asarray(x, dtype=float)
    beta = np.zeros(w.rank) if beta0 is None else np.asarray(beta0, dtype=float).copy()
    best_beta = beta
    best_res = np.inf
    iters = 0
    converged = False
    for iters in range(max_iter + 1):
        z = _shift_point(beta, x, w)
        res_vec = w.U.T @ (x - prox_box_diag(z, box)) + beta
        res = float(np.linalg.norm(res_vec))
        if res < best_res:
            best_res, best_beta = res, beta
        if res <= eps:
            converged = True
            break
        if iters == max_iter:
            break
        h = _newton_matrix(z, w, box)
        try:
            step = np.linalg.solve(h, res_vec)
        except np.linalg.LinAlgError:
            mu = _DAMPING * np.linalg.norm(h, np.inf)
            step = np.linalg.solve(h + mu * np.eye(w.rank), res_vec)
        beta = beta - step
    if not converged:
        log.warning(
            "semismooth Newton stopped at residual %.3e after %d iterations", best_res, iters
        )
    info = {"iterations": iters, "residual": best_res, "converged": converged}
    beta = best_beta
    return (beta, info) if full_output else beta


def wpm_box(x, w, box, beta0=None, eps=1e-6, max_iter=50, full_output=False):
    """Weighted projection of ``x`` onto the box under the metric ``w``.

    With a rank-0 metric this is the plain clamp; otherwise the clamp is
    evaluated at the low-rank-corrected point.
    """
    x = np.asarray(x, dtype=float)
    if w.rank == 0:
        u = prox_box_diag(x, box)
        if full_output:
            return u, {"beta": np.zeros(0), "iterations": 0, "residual": 0.0, "converged": True}
        return u
    beta, info = semismooth_newton(
        x, w, box, beta0=beta0, eps=eps, max_iter=max_iter, full_output=True
    )
    u = prox_box_diag(_shift_point(beta, x, w), box)
    if full_output:
        info = dict(info, beta=beta)
        return u, info
    return u


def moreau_envelope(x, w, box, **kwargs):
    """Value of the W-weighted Moreau envelope of the box indicator at x."""
    u = wpm_box(x, w, box, **kwargs)
    diff = u - np.asarray(x, dtype=float)
    return 0.5 * float(np.dot(diff, apply_metric(w, diff)))


__all__ = [
    "DiagPlusLowRank",
    "BoxSet",
    "apply_metric",
    "apply_metric_inverse",
    "prox_box_diag",
    "phi",
    "semismooth_newton",
    "wpm_box",
    "moreau_envelope",
]
