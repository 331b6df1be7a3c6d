"""Outer solvers: the mini-batch quasi-Newton proximal loop and baselines.

All three solvers share the same view partition, prox machinery and
iteration trace format.  The quasi-Newton loop keeps one slot per subset
holding the anchor iterate, its subset gradient and a rank-1 curvature
estimate; each iteration refreshes exactly one slot (one subset-gradient
evaluation, never a full gradient) and solves a weighted constrained TV
prox under the aggregated metric.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import dual_tv_solver
from .dual_tv_solver import DualTvProblem
from .forward_models import full_cost, snr_db, subset_gradient
from .hessian_sr1 import Sr1Estimate, estimate_sr1
from .tv_ops import TvMode
from .wpm import BoxSet, DiagPlusLowRank, apply_metric_inverse, prox_box_diag

log = logging.getLogger(__name__)


def kappa(k, t, n_subsets):
    """Cyclic subset index for term ``t`` at iteration ``k`` (all 1-based).

    For fixed k the values over t = 1..n_subsets are a permutation of
    {1, ..., n_subsets}; consecutive iterations shift the assignment by
    one so each slot is refreshed exactly once per cycle.
    """
    if not 1 <= t <= n_subsets:
        raise ValueError(f"term index {t} out of range [1, {n_subsets}]")
    return (k - 1 - t) % n_subsets + 1


def partition_views(n_views, n_subsets, strategy="equispaced"):
    """Split view indices {0, ..., L-1} into disjoint subsets.

    ``equispaced`` (default) interleaves round-robin, which spreads the
    angular coverage across subsets; ``contiguous`` splits blocks.
    Cardinalities may differ by one when L is not a multiple.
    """
    if not 1 <= n_subsets <= n_views:
        raise ValueError(f"need 1 <= n_subsets <= {n_views}, got {n_subsets}")
    idx = np.arange(n_views)
    if strategy == "equispaced":
        return [idx[t::n_subsets] for t in range(n_subsets)]
    if strategy == "contiguous":
        return [part for part in np.array_split(idx, n_subsets)]
    raise ValueError(f"unknown partition strategy: {strategy!r}")


@dataclass
class SubsetSlot:
    """Stored anchor triple of one subset: iterate, gradient, curvature."""

    x: np.ndarray
    grad: np.ndarray
    hess: Sr1Estimate


def aggregate_metric(slots):
    """Sum of the per-slot estimates as one diag-plus-low-rank metric.

    tau is the sum of the slot scalars and the columns are the nonzero
    slot vectors in slot order; the sign is always +.
    """
    tau = sum(s.hess.tau for s in slots)
    cols = [s.hess.u for s in slots if s.hess.u is not None]
    n = slots[0].x.shape[0]
    u = np.column_stack(cols) if cols else np.zeros((n, 0))
    return DiagPlusLowRank(tau=tau, U=u)


def compute_v_k(slots, w, step):
    """Metric-weighted center of the aggregated quadratic model.

    v = W^{-1} sum_t (B_t x_t - step * g_t) over the stored slots, with W
    the aggregate of the slot estimates.
    """
    acc = np.zeros_like(slots[0].x)
    for s in slots:
        acc += s.hess.apply(s.x) - step * s.grad
    return apply_metric_inverse(w, acc)


@dataclass
class SolverConfig:
    """Shared configuration of the outer solvers.

    ``step`` is the outer stepsize a_k (constant); None selects the
    per-solver default (1 for the quasi-Newton solvers, the inverse of
    the largest subset Lipschitz estimate for the accelerated baseline).
    ``alphas`` are per-subset Lipschitz constants of the subset
    fidelities; when omitted they are estimated by power iteration on the
    Gauss-Newton curvature at the initial point.
    """

    subsets: int = 1
    step: float = None
    tv_weight: float = 0.0
    gamma: float = 0.8
    max_outer: int = 100
    mode: TvMode = TvMode.ISOTROPIC
    box: BoxSet = field(default_factory=BoxSet)
    partition: str = "equispaced"
    seed: int = 0
    dual_eps: float = 1e-5
    dual_max_iter: int = 100
    newton_eps: float = 1e-6
    newton_max_iter: int = 50
    alphas: object = None
    alpha_power_iters: int = 30
    alpha_safety: float = 1.05
    force_diagonal_metric: bool = False
    momentum: bool = True

    def __post_init__(self):
        if self.subsets < 1:
            raise ValueError("subsets must be >= 1")
        if self.step is not None and not self.step > 0:
            raise ValueError("step must be positive")
        if self.tv_weight < 0:
            raise ValueError("tv_weight must be nonnegative")
        self.mode = TvMode.parse(self.mode)


@dataclass
class TraceRow:
    iteration: int
    cost: float
    snr_db: float
    elapsed_s: float
    inner_iters: int
    grad_evals: int
    full_grad_evals: int


@dataclass
class IterationTrace:
    """Per-iteration record of the reporting cost, SNR and counters.

    The cost column is the full objective over every view; evaluating it
    is reporting only and is not counted as gradient work.
    """

    solver: str
    rows: list = field(default_factory=list)

    def column(self, name):
        return np.array([getattr(r, name) for r in self.rows], dtype=float)

    @property
    def final_cost(self):
        return self.rows[-1].cost


def estimate_subset_lipschitz(views, parts, x0, iters=30, safety=1.05, seed=0):
    """Per-subset Lipschitz estimates via power iteration.

    Runs the power method on the Gauss-Newton curvature of each subset
    fidelity at ``x0`` (mean of J^T J over the subset) and scales by a
    small safety factor to compensate the one-sided convergence of the
    power method.
    """
    rng = np.random.default_rng(seed)
    alphas = []
    for part in parts:
        v = rng.standard_normal(x0.shape[0])
        v /= np.linalg.norm(v)
        lam = 1.0
        for _ in range(iters):
            w = np.zeros_like(v)
            for i in part:
                w += views[i].adjoint_vec(x0, views[i].jacobian_vec(x0, v))
            w /= len(part)
            lam = float(np.dot(v, w))
            nw = np.linalg.norm(w)
            if nw == 0.0:
                lam = 0.0
                break
            v = w / nw
        alphas.append(max(lam, 1e-12) * safety)
    return np.asarray(alphas)


def default_initializer(views, grid, box):
    """Mean adjoint image of the measurements, clamped to the box."""
    x0 = np.zeros(grid.size)
    zeros = np.zeros(grid.size)
    for v in views:
        x0 += v.adjoint_vec(zeros, v.y)
    x0 /= len(views)
    return prox_box_diag(x0, box)


class _Tracer:
    """Accumulates trace rows and cumulative counters for one run."""

    def __init__(self, solver, views, grid, config, ground_truth, on_iteration):
        self.trace = IterationTrace(solver=solver)
        self.views = views
        self.grid = grid
        self.config = config
        self.ground_truth = ground_truth
        self.on_iteration = on_iteration
        self.grad_evals = 0
        self.full_grad_evals = 0
        self.t0 = time.monotonic()

    def record(self, k, x, inner_iters=0, info=None):
        cost = full_cost(self.views, x, self.config.tv_weight, self.grid, self.config.mode)
        snr = (
            snr_db(x, self.ground_truth) if self.ground_truth is not None else float("nan")
        )
        row = TraceRow(
            iteration=k,
            cost=float(cost),
            snr_db=float(snr),
            elapsed_s=time.monotonic() - self.t0,
            inner_iters=inner_iters,
            grad_evals=self.grad_evals,
            full_grad_evals=self.full_grad_evals,
        )
        self.trace.rows.append(row)
        if self.on_iteration is not None:
            self.on_iteration(k, x, row, info or {})
        if not np.isfinite(cost):
            raise FloatingPointError(f"{self.trace.solver}: cost diverged at iteration {k}")


def _prepare(views, grid, config, x0):
    parts = partition_views(len(views), config.subsets, config.partition)
    if x0 is None:
        x0 = default_initializer(views, grid, config.box)
    x0 = np.asarray(x0, dtype=float)
    if config.alphas is not None:
        alphas = np.asarray(config.alphas, dtype=float)
        if alphas.shape[0] != config.subsets:
            raise ValueError("alphas must have one entry per subset")
    else:
        alphas = estimate_subset_lipschitz(
            views, parts, x0, config.alpha_power_iters, config.alpha_safety, config.seed
        )
    return parts, x0, alphas


def bqnpm_run(views, grid, config, x0=None, ground_truth=None, on_iteration=None):
    """Mini-batch quasi-Newton proximal loop.

    The first ``subsets`` iterations take diagonal-metric proximal
    gradient steps on single subsets while the slots fill; afterwards
    each iteration refreshes one slot with a fresh gradient and an SR1
    estimate against the slot's previous anchor, then solves the weighted
    TV prox under the aggregated metric.  Exactly one subset gradient is
    evaluated per iteration.

    Returns
    -------
    (x, trace) : final image and :class:`IterationTrace`.
    """
    parts, x, alphas = _prepare(views, grid, config, x0)
    ks = config.subsets
    a = 1.0 if config.step is None else config.step
    lam = config.tv_weight
    tracer = _Tracer("bqnpm", views, grid, config, ground_truth, on_iteration)
    slots = {}
    p_warm = None
    beta_warm = None
    tracer.record(0, x)
    for k in range(1, config.max_outer + 1):
        sigma = kappa(k, 1, ks)
        g = subset_gradient(views, parts[sigma - 1], x)
        tracer.grad_evals += 1
        if k <= ks:
            est = Sr1Estimate(tau=alphas[sigma - 1])
        else:
            old = slots[sigma]
            s = x - old.x
            if config.force_diagonal_metric or not np.any(s):
                est = Sr1Estimate(tau=alphas[sigma - 1])
            else:
                est = estimate_sr1(s, g - old.grad, config.gamma, alphas[sigma - 1])
        slots[sigma] = SubsetSlot(x=x.copy(), grad=g, hess=est)
        if k <= ks:
            # single-subset step with B = alpha*I and the plain TV weight
            w = DiagPlusLowRank.diagonal(est.tau, grid.size)
            v = x - (a / est.tau) * g
            reg = a * lam
        else:
            ordered = [slots[kappa(k, t, ks)] for t in range(1, ks + 1)]
            w = aggregate_metric(ordered)
            v = compute_v_k(ordered, w, a)
            reg = a * ks * lam
        prob = DualTvProblem(
            grid=grid,
            v=v,
            w=w,
            reg=reg,
            mode=config.mode,
            box=config.box,
            warm_start=p_warm,
            beta_warm=beta_warm,
            newton_eps=config.newton_eps,
            newton_max_iter=config.newton_max_iter,
        )
        rep = dual_tv_solver.solve(prob, eps=config.dual_eps, max_iter=config.dual_max_iter)
        x = rep.x
        p_warm = rep.p_star
        beta_warm = rep.beta_star
        tracer.record(k, x, inner_iters=rep.iterations, info={"slots": slots, "metric": w})
    return x, tracer.trace


def aspm_run(views, grid, config, x0=None, ground_truth=None, on_iteration=None):
    """Accelerated stochastic proximal baseline.

    One cyclic subset gradient per iteration, a diagonal 1/step metric
    and the standard momentum sequence on the iterates.  ``momentum``
    False gives the plain proximal-gradient variant.
    """
    parts, x, alphas = _prepare(views, grid, config, x0)
    a = (1.0 / float(np.max(alphas))) if config.step is None else config.step
    tracer = _Tracer("aspm", views, grid, config, ground_truth, on_iteration)
    y = x.copy()
    x_prev = x.copy()
    t = 1.0
    p_warm = None
    beta_warm = None
    w = DiagPlusLowRank.diagonal(1.0 / a, grid.size)
    tracer.record(0, x)
    for k in range(1, config.max_outer + 1):
        sigma = kappa(k, 1, config.subsets)
        g = subset_gradient(views, parts[sigma - 1], y)
        tracer.grad_evals += 1
        prob = DualTvProblem(
            grid=grid,
            v=y - a * g,
            w=w,
            reg=config.tv_weight,
            mode=config.mode,
            box=config.box,
            warm_start=p_warm,
            beta_warm=beta_warm,
            newton_eps=config.newton_eps,
            newton_max_iter=config.newton_max_iter,
        )
        rep = dual_tv_solver.solve(prob, eps=config.dual_eps, max_iter=config.dual_max_iter)
        x = rep.x
        p_warm = rep.p_star
        beta_warm = rep.beta_star
        if config.momentum:
            t_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
            y = x + ((t - 1.0) / t_next) * (x - x_prev)
            t = t_next
        else:
            y = x.copy()
        x_prev = x
        tracer.record(k, x, inner_iters=rep.iterations)
    return x, tracer.trace


def sqnpm_run(views, grid, config, x0=None, ground_truth=None, on_iteration=None):
    """Variance-reduced stochastic quasi-Newton baseline.

    Every ``subsets`` iterations the full gradient is evaluated at a
    snapshot; inner iterations use the snapshot-corrected subset
    gradients and a rank-1 metric estimated from snapshot differences.
    """
    parts, x, alphas = _prepare(views, grid, config, x0)
    ks = config.subsets
    a = 1.0 if config.step is None else config.step
    alpha_bar = float(np.mean(alphas))
    tracer = _Tracer("sqnpm", views, grid, config, ground_truth, on_iteration)
    snap_x = None
    snap_mu = None
    snap_grads = None
    est = Sr1Estimate(tau=alpha_bar)
    p_warm = None
    beta_warm = None
    tracer.record(0, x)
    for k in range(1, config.max_outer + 1):
        if (k - 1) % ks == 0:
            new_snap = x.copy()
            new_grads = [subset_gradient(views, part, new_snap) for part in parts]
            new_mu = sum(new_grads) / ks
            tracer.full_grad_evals += 1
            if snap_x is not None:
                s = new_snap - snap_x
                if config.force_diagonal_metric or not np.any(s):
                    est = Sr1Estimate(tau=alpha_bar)
                else:
                    est = estimate_sr1(s, new_mu - snap_mu, config.gamma, alpha_bar)
            snap_x, snap_mu, snap_grads = new_snap, new_mu, new_grads
        sigma = kappa(k, 1, ks)
        g = subset_gradient(views, parts[sigma - 1], x)
        tracer.grad_evals += 1
        g_vr = g - snap_grads[sigma - 1] + snap_mu
        w = DiagPlusLowRank(tau=est.tau, U=est.u if est.u is not None else np.zeros((grid.size, 0)))
        v = x - a * apply_metric_inverse(w, g_vr)
        prob = DualTvProblem(
            grid=grid,
            v=v,
            w=w,
            reg=a * config.tv_weight,
            mode=config.mode,
            box=config.box,
            warm_start=p_warm,
            beta_warm=beta_warm,
            newton_eps=config.newton_eps,
            newton_max_iter=config.newton_max_iter,
        )
        rep = dual_tv_solver.solve(prob, eps=config.dual_eps, max_iter=config.dual_max_iter)
        x = rep.x
        p_warm = rep.p_star
        beta_warm = rep.beta_star
        tracer.record(
            k, x, inner_iters=rep.iterations, info={"vr_gradient": g_vr, "snapshot": snap_x}
        )
    return x, tracer.trace


RUNNERS = {"bqnpm": bqnpm_run, "aspm": aspm_run, "sqnpm": sqnpm_run}


def run_solver(name, views, grid, config, **kwargs):
    """Dispatch by solver name ('bqnpm', 'aspm' or 'sqnpm')."""
    if name not in RUNNERS:
        raise ValueError(f"unknown solver: {name!r}")
    return RUNNERS[name](views, grid, config, **kwargs)


__all__ = [
    "kappa",
    "partition_views",
    "SubsetSlot",
    "aggregate_metric",
    "compute_v_k",
    "SolverConfig",
    "TraceRow",
    "IterationTrace",
    "estimate_subset_lipschitz",
    "default_initializer",
    "bqnpm_run",
    "aspm_run",
    "sqnpm_run",
    "run_solver",
    "RUNNERS",
]
