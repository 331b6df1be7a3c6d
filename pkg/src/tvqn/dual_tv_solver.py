"""Accelerated dual projected-gradient solver for the weighted TV prox.

Solves, for a diag-plus-low-rank metric W, a box constraint set C and a
regularization weight ``reg`` >= 0,

    x* = argmin_{x in C}  1/2 ||x - v||_W^2 + reg * TV(x)

through the dual of the TV term: the dual field P is updated by projected
gradient steps with FISTA momentum, and every dual iteration evaluates one
weighted box projection.  The returned primal point is exactly feasible
because the last operation is a clamp composition.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tv_ops import Grid, TvMode, dual_adjoint, dual_divergence, project_dual
from .wpm import BoxSet, DiagPlusLowRank, apply_metric, apply_metric_inverse, wpm_box


@dataclass
class DualTvProblem:
    """One weighted constrained TV prox instance.

    Attributes
    ----------
    grid : Grid
        Geometry of the image.
    v : ndarray
        Center of the quadratic term (flat image).
    w : DiagPlusLowRank
        Metric of the quadratic term.
    reg : float
        Weight of the TV term (already includes any stepsize and subset
        factors accumulated by the outer solver).
    mode : TvMode
        Isotropic or anisotropic TV.
    box : BoxSet
        Constraint set.
    omega : float, optional
        Inverse of the smallest eigenvalue of the metric, used in the dual
        step size.  Defaults to 1/tau, which is exact for any rank < N
        low-rank part (the metric then has tau as an eigenvalue and
        tau*I as a lower bound).
    warm_start : ndarray, optional
        Dual field from a previous solve, shape (d, N).
    beta_warm : ndarray, optional
        Low-rank correction coefficients from a previous solve; ignored
        when the rank changed.
    newton_eps, newton_max_iter : float, int
        Tolerances of the inner semi-smooth Newton solver.
    """

    grid: Grid
    v: np.ndarray
    w: DiagPlusLowRank
    reg: float
    mode: TvMode = TvMode.ISOTROPIC
    box: BoxSet = field(default_factory=BoxSet)
    omega: float = None
    warm_start: np.ndarray = None
    beta_warm: np.ndarray = None
    newton_eps: float = 1e-6
    newton_max_iter: int = 50

    def __post_init__(self):
        if self.reg < 0:
            raise ValueError("reg must be nonnegative")
        if self.omega is None:
            self.omega = 1.0 / self.w.tau
        if not self.omega > 0:
            raise ValueError("omega must be positive")
        if self.beta_warm is not None:
            self.beta_warm = np.asarray(self.beta_warm, dtype=float)
        self.mode = TvMode.parse(self.mode)


@dataclass
class DualSolveReport:
    """Outcome of one dual solve."""

    x: np.ndarray
    p_star: np.ndarray
    iterations: int
    rel_change: float
    converged: bool
    newton_iterations: int = 0
    beta_star: np.ndarray = None


def metric_min_eig_inverse(w, iters=50, seed=0):
    """Estimate 1/lambda_min(W) by inverse power iteration via Woodbury.

    Provided as the optional refinement of the 1/tau default; for any
    rank < N metric the two coincide because the low-rank part has a
    nontrivial kernel.
    """
    n = w.dim
    if n == 0 or w.rank == 0:
        return 1.0 / w.tau
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(n)
    v /= np.linalg.norm(v)
    mu = 1.0 / w.tau
    for _ in range(iters):
        z = apply_metric_inverse(w, v)
        mu = float(np.dot(v, z))
        nz = np.linalg.norm(z)
        if nz == 0.0:
            break
        v = z / nz
    return mu


def w_of_p(prob, p):
    """Center shift w(P) = v - reg * W^{-1} d(P)."""
    if prob.reg == 0.0:
        return np.asarray(prob.v, dtype=float)
    return prob.v - prob.reg * apply_metric_inverse(prob.w, dual_divergence(prob.grid, p))


def _prox_of(prob, p, beta0=None):
    return wpm_box(
        w_of_p(prob, p),
        prob.w,
        prob.box,
        beta0=beta0,
        eps=prob.newton_eps,
        max_iter=prob.newton_max_iter,
        full_output=True,
    )


def dual_gradient(prob, p):
    """Gradient of the dual objective at P: -2 reg [D^1 q; ...; D^d q] with
    q the weighted projection of w(P)."""
    if prob.reg == 0.0:
        return np.zeros((prob.grid.ndim, prob.grid.size))
    q, _ = _prox_of(prob, p)
    return -2.0 * prob.reg * dual_adjoint(prob.grid, q)


def dual_objective(prob, p):
    """Dual objective ||w(P)||_W^2 - ||w(P) - prox(w(P))||_W^2 (minimized)."""
    wp = w_of_p(prob, p)
    q, _ = _prox_of(prob, p)
    diff = wp - q
    return float(np.dot(wp, apply_metric(prob.w, wp)) - np.dot(diff, apply_metric(prob.w, diff)))


def dual_step_size(prob):
    """Analytic dual step 1/(4 d omega reg): 1/(8 omega reg) in 2-D,
    1/(12 omega reg) in 3-D."""
    return 1.0 / (4.0 * prob.grid.ndim * prob.omega * prob.reg)


def solve(prob, eps=1e-5, max_iter=100, accelerated=True):
    """Run the accelerated dual projected-gradient iteration.

    Parameters
    ----------
    prob : DualTvProblem
    eps : float
        Stop when ||P_{k+1} - P_k|| / ||P_k|| drops below this.
    max_iter : int
        Dual iteration cap; hitting it is reported, not fatal.
    accelerated : bool
        Disable to run the plain projected-gradient variant (used by tests
        that check monotone descent of the dual objective).

    Returns
    -------
    DualSolveReport
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if max_iter < 1:
        raise ValueError("max_iter must be >= 1")
    d, n = prob.grid.ndim, prob.grid.size
    beta_warm = prob.beta_warm
    if beta_warm is not None and beta_warm.shape[0] != prob.w.rank:
        beta_warm = None
    if prob.reg == 0.0:
        x, info = wpm_box(
            prob.v,
            prob.w,
            prob.box,
            beta0=beta_warm,
            eps=prob.newton_eps,
            max_iter=prob.newton_max_iter,
            full_output=True,
        )
        p0 = np.zeros((d, n)) if prob.warm_start is None else np.asarray(prob.warm_start)
        return DualSolveReport(
            x=x,
            p_star=p0,
            iterations=1,
            rel_change=0.0,
            converged=True,
            newton_iterations=info["iterations"],
            beta_star=info["beta"],
        )

    step = dual_step_size(prob)
    if prob.warm_start is not None:
        p = np.asarray(prob.warm_start, dtype=float).copy()
        if p.shape != (d, n):
            raise ValueError(f"warm start must have shape {(d, n)}")
    else:
        p = np.zeros((d, n))
    p_bar = p.copy()
    t = 1.0
    newton_total = 0
    rel = np.inf
    converged = False
    iterations = 0
    for iterations in range(1, max_iter + 1):
        q, info = _prox_of(prob, p_bar, beta0=beta_warm)
        beta_warm = info["beta"]
        newton_total += info["iterations"]
        p_next = project_dual(p_bar + step * dual_adjoint(prob.grid, q), prob.mode)
        num = np.linalg.norm(p_next - p)
        den = np.linalg.norm(p)
        rel = 0.0 if num == 0.0 else (num / den if den > 0.0 else np.inf)
        if rel < eps:
            p = p_next
            converged = True
            break
        if accelerated:
            t_next = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * t * t))
            p_bar = p_next + ((t - 1.0) / t_next) * (p_next - p)
            t = t_next
        else:
            p_bar = p_next.copy()
        p = p_next
    x, info = _prox_of(prob, p, beta0=beta_warm)
    newton_total += info["iterations"]
    return DualSolveReport(
        x=x,
        p_star=p,
        iterations=iterations,
        rel_change=float(rel),
        converged=converged,
        newton_iterations=newton_total,
        beta_star=info["beta"],
    )


def primal_objective(prob, x):
    """Primal objective 1/2 ||x - v||_W^2 + reg * TV(x) (reporting helper)."""
    from .tv_ops import tv_value

    diff = np.asarray(x, dtype=float) - prob.v
    return 0.5 * float(np.dot(diff, apply_metric(prob.w, diff))) + prob.reg * tv_value(
        prob.grid, x, prob.mode
    )


__all__ = [
    "DualTvProblem",
    "DualSolveReport",
    "metric_min_eig_inverse",
    "w_of_p",
    "dual_gradient",
    "dual_objective",
    "dual_step_size",
    "solve",
    "primal_objective",
]
