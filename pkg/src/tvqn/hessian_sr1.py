"""Memory-frugal symmetric-rank-1 curvature estimation.

Each estimate is B = tau*I + u u^T built from one secant pair: the iterate
difference ``s`` over one subset cycle and the matching gradient
difference ``m``.  Only the scalar and the vector are stored.  Accepted
updates satisfy the secant equation B s = m exactly; rejected or skipped
updates degrade gracefully to a positive multiple of the identity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

# relative threshold of the standard SR1 skip rule
_SKIP_TOL = 1e-8


@dataclass(frozen=True, eq=False)
class Sr1Estimate:
    """Curvature estimate B = tau*I + u u^T (u may be None for rank 0)."""

    tau: float
    u: np.ndarray = None

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if self.u is not None:
            u = np.asarray(self.u, dtype=float)
            object.__setattr__(self, "u", None if not np.any(u) else u)

    @property
    def rank(self):
        return 0 if self.u is None else 1

    def apply(self, x):
        out = self.tau * np.asarray(x, dtype=float)
        if self.u is not None:
            out = out + self.u * np.dot(self.u, x)
        return out

    def dense(self, n):
        b = self.tau * np.eye(n)
        if self.u is not None:
            b += np.outer(self.u, self.u)
        return b


def estimate_sr1(s, m, gamma=0.8, alpha_fallback=1.0):
    """Estimate B = tau*I + u u^T from the secant pair (s, m).

    Parameters
    ----------
    s : ndarray
        Iterate difference over one cycle of the same subset; must be
        nonzero.
    m : ndarray
        Gradient difference of that subset over the same pair of iterates.
    gamma : float
        Damping factor in (0, 1) for the diagonal seed
        tau = gamma * <m, m> / <s, m>.
    alpha_fallback : float
        Positive diagonal used when the curvature along ``s`` is negative
        or zero (then B = alpha_fallback * I).

    Returns
    -------
    Sr1Estimate
        Positive definite by construction.  When the rank-1 part was
        accepted, B s = m holds exactly.

    Notes
    -----
    The rank-1 term is skipped (u = None) when the standard relative skip
    rule fires or when <m - tau*s, s> <= 0; the latter guard keeps the
    square root in the update real and the estimate positive definite.
    """
    s = np.asarray(s, dtype=float)
    m = np.asarray(m, dtype=float)
    if not np.any(s):
        raise ValueError("degenerate step: s must be nonzero")
    if not 0.0 < gamma < 1.0:
        raise ValueError(f"gamma must lie in (0, 1), got {gamma}")
    if not alpha_fallback > 0:
        raise ValueError(f"alpha_fallback must be positive, got {alpha_fallback}")

    sm = float(np.dot(s, m))
    if sm == 0.0:
        return Sr1Estimate(tau=alpha_fallback)
    tau = gamma * float(np.dot(m, m)) / sm
    if tau < 0.0:
        return Sr1Estimate(tau=alpha_fallback)

    resid = m - tau * s
    curv = float(np.dot(resid, s))
    if curv <= _SKIP_TOL * np.linalg.norm(s) * np.linalg.norm(resid) or curv <= 0.0:
        return Sr1Estimate(tau=tau)
    return Sr1Estimate(tau=tau, u=resid / math.sqrt(curv))


__all__ = ["Sr1Estimate", "estimate_sr1"]
