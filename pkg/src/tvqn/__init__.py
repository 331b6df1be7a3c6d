"""Mini-batch quasi-Newton proximal solvers for constrained TV problems."""

from .tv_ops import Grid, TvMode, tv_value
from .wpm import BoxSet, DiagPlusLowRank, prox_box_diag, wpm_box
from .dual_tv_solver import DualTvProblem, solve as solve_dual_tv
from .hessian_sr1 import Sr1Estimate, estimate_sr1
from .forward_models import (
    ViewProblem,
    make_linear_views,
    make_nonlinear_views,
    make_phantom,
    snr_db,
)
from .solvers import IterationTrace, SolverConfig, aspm_run, bqnpm_run, sqnpm_run

__version__ = "0.1.0"

__all__ = [
    "Grid",
    "TvMode",
    "tv_value",
    "BoxSet",
    "DiagPlusLowRank",
    "prox_box_diag",
    "wpm_box",
    "DualTvProblem",
    "solve_dual_tv",
    "Sr1Estimate",
    "estimate_sr1",
    "ViewProblem",
    "make_linear_views",
    "make_nonlinear_views",
    "make_phantom",
    "snr_db",
    "IterationTrace",
    "SolverConfig",
    "aspm_run",
    "bqnpm_run",
    "sqnpm_run",
    "__version__",
]
