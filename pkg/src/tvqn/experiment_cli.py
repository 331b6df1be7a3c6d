"""Configuration-driven experiment harness and command-line interface.

Experiments are described by a TOML file (grid, phantom, measurement
model, one or more solver sections).  Each solver runs from the same
initializer; per-solver traces go to versioned CSV files, final images to
a small binary volume format, and optional SVG plots show cost and SNR
against iteration and wall time.
"""

from __future__ import annotations

import argparse
import csv
import logging
import struct
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import solvers
from .forward_models import make_linear_views, make_nonlinear_views, make_phantom
from .solvers import IterationTrace, SolverConfig, TraceRow
from .tv_ops import Grid
from .wpm import BoxSet

log = logging.getLogger(__name__)

TRACE_SCHEMA = "tvqn-trace v1"
TRACE_COLUMNS = ("iter", "cost", "snr_db", "elapsed_s", "inner_iters", "grad_evals", "full_grad_evals")

_VOLUME_MAGIC = b"TVQNVOL1"
_VOLUME_HEADER = struct.Struct("<8sI3I8x")  # magic, ndim, dims (unused = 1), pad to 32


# ---------------------------------------------------------------------------
# volume format


def dump_volume(x, path):
    """Write an n-dimensional float image as little-endian 64-bit floats.

    The 32-byte header stores a magic tag, the dimensionality and the side
    lengths; the payload follows in the canonical flat order.
    """
    x = np.asarray(x, dtype=float)
    if not 1 <= x.ndim <= 3:
        raise ValueError("volumes must be 1-, 2- or 3-dimensional")
    dims = list(x.shape) + [1] * (3 - x.ndim)
    header = _VOLUME_HEADER.pack(_VOLUME_MAGIC, x.ndim, *dims)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(x.reshape(-1, order="F"), dtype="<f8").tobytes())


def load_volume(path):
    """Read a volume written by :func:`dump_volume`."""
    with open(path, "rb") as fh:
        header = fh.read(_VOLUME_HEADER.size)
        if len(header) < _VOLUME_HEADER.size:
            raise ValueError(f"{path}: truncated header")
        magic, ndim, k1, k2, k3 = _VOLUME_HEADER.unpack(header)
        if magic != _VOLUME_MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}")
        if not 1 <= ndim <= 3:
            raise ValueError(f"{path}: bad dimensionality {ndim}")
        dims = (k1, k2, k3)[:ndim]
        count = int(np.prod(dims))
        payload = fh.read(count * 8 + 1)
        if len(payload) != count * 8:
            raise ValueError(f"{path}: payload size mismatch")
    flat = np.frombuffer(payload, dtype="<f8").copy()
    return flat.reshape(dims, order="F")


# ---------------------------------------------------------------------------
# trace CSV


def write_trace(trace, path):
    """Write an iteration trace as a versioned CSV file."""
    with open(path, "w", newline="") as fh:
        fh.write(f"# {TRACE_SCHEMA}\n")
        fh.write(f"# solver: {trace.solver}\n")
        writer = csv.writer(fh)
        writer.writerow(TRACE_COLUMNS)
        for r in trace.rows:
            writer.writerow(
                [
                    r.iteration,
                    format(r.cost, ".17g"),
                    format(r.snr_db, ".17g"),
                    format(r.elapsed_s, ".6f"),
                    r.inner_iters,
                    r.grad_evals,
                    r.full_grad_evals,
                ]
            )


def load_trace(path):
    """Read a trace CSV, rejecting unknown schema versions."""
    with open(path, newline="") as fh:
        first = fh.readline().strip()
        if first != f"# {TRACE_SCHEMA}":
            raise ValueError(f"{path}: unsupported trace schema {first!r}")
        solver = "unknown"
        pos = fh.tell()
        line = fh.readline()
        if line.startswith("# solver:"):
            solver = line.split(":", 1)[1].strip()
        else:
            fh.seek(pos)
        reader = csv.reader(fh)
        header = tuple(next(reader))
        if header != TRACE_COLUMNS:
            raise ValueError(f"{path}: unexpected columns {header}")
        trace = IterationTrace(solver=solver)
        for row in reader:
            trace.rows.append(
                TraceRow(
                    iteration=int(row[0]),
                    cost=float(row[1]),
                    snr_db=float(row[2]),
                    elapsed_s=float(row[3]),
                    inner_iters=int(row[4]),
                    grad_evals=int(row[5]),
                    full_grad_evals=int(row[6]),
                )
            )
    return trace


# ---------------------------------------------------------------------------
# plots


def emit_plots(traces, outdir):
    """Write cost/SNR versus iteration/time plots as deterministic SVGs.

    Returns the list of created files.  The cost axis is logarithmic.
    """
    if not traces:
        raise ValueError("need at least one trace to plot")
    import matplotlib

    matplotlib.use("Agg", force=False)
    matplotlib.rcParams["svg.hashsalt"] = "tvqn"
    import matplotlib.pyplot as plt

    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    panels = [
        ("cost_vs_iter", "iteration", "iteration", "full cost", "cost", True),
        ("cost_vs_time", "elapsed_s", "wall time [s]", "full cost", "cost", True),
        ("snr_vs_iter", "iteration", "iteration", "SNR [dB]", "snr_db", False),
        ("snr_vs_time", "elapsed_s", "wall time [s]", "SNR [dB]", "snr_db", False),
    ]
    files = []
    for name, xcol, xlabel, ylabel, ycol, logy in panels:
        fig, ax = plt.subplots(figsize=(5.0, 3.4))
        for trace in traces:
            ax.plot(trace.column(xcol), trace.column(ycol), label=trace.solver)
        if logy:
            ax.set_yscale("log")
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
        ax.legend()
        fig.tight_layout()
        path = outdir / f"{name}.svg"
        fig.savefig(path, metadata={"Date": None})
        plt.close(fig)
        files.append(path)
    return files


# ---------------------------------------------------------------------------
# configuration


@dataclass
class SolverSpec:
    name: str
    label: str
    config: SolverConfig


@dataclass
class ExperimentConfig:
    """Parsed experiment description."""

    name: str
    outdir: str
    seed: int
    grid: Grid
    phantom: dict
    model: dict
    solver_specs: list = field(default_factory=list)
    emit_plots: bool = False


_SOLVER_KEYS = {
    "subsets": "subsets",
    "k_s": "subsets",
    "step": "step",
    "tv_weight": "tv_weight",
    "lambda": "tv_weight",
    "gamma": "gamma",
    "iterations": "max_outer",
    "max_outer": "max_outer",
    "mode": "mode",
    "partition": "partition",
    "seed": "seed",
    "dual_eps": "dual_eps",
    "dual_max_iter": "dual_max_iter",
    "newton_eps": "newton_eps",
    "newton_max_iter": "newton_max_iter",
    "momentum": "momentum",
}


def _solver_config(raw, seed):
    kwargs = {"seed": seed}
    for key, value in raw.items():
        if key in ("name", "label", "box_lower", "box_upper"):
            continue
        if key.lower() not in _SOLVER_KEYS:
            raise ValueError(f"unknown solver option: {key!r}")
        kwargs[_SOLVER_KEYS[key.lower()]] = value
    lower = raw.get("box_lower", 0.0)
    upper = raw.get("box_upper", float("inf"))
    kwargs["box"] = BoxSet(lower, upper)
    return SolverConfig(**kwargs)


def parse_config(path):
    """Parse a TOML experiment file into an :class:`ExperimentConfig`."""
    path = Path(path)
    with open(path, "rb") as fh:
        raw = tomllib.load(fh)
    exp = raw.get("experiment", {})
    gridspec = raw.get("grid", {})
    dims = gridspec.get("dims")
    if not dims:
        raise ValueError(f"{path}: missing grid.dims")
    grid = Grid(tuple(int(k) for k in dims))
    seed = int(exp.get("seed", 0))
    specs = []
    for raw_solver in raw.get("solver", []):
        name = raw_solver.get("name")
        if name not in solvers.RUNNERS:
            raise ValueError(f"{path}: unknown solver name {name!r}")
        label = raw_solver.get("label", name)
        specs.append(SolverSpec(name=name, label=label, config=_solver_config(raw_solver, seed)))
    if not specs:
        raise ValueError(f"{path}: no [[solver]] sections")
    return ExperimentConfig(
        name=exp.get("name", path.stem),
        outdir=exp.get("outdir", f"out/{path.stem}"),
        seed=seed,
        grid=grid,
        phantom=dict(raw.get("phantom", {})),
        model=dict(raw.get("model", {})),
        solver_specs=specs,
        emit_plots=bool(exp.get("plots", False)),
    )


def build_problem(config):
    """Instantiate phantom and views from a parsed configuration."""
    phantom = make_phantom(
        config.grid,
        kind=config.phantom.get("kind", "spheres"),
        eta_m=float(config.phantom.get("eta_m", 1.333)),
        eta_max=float(config.phantom.get("eta_max", 1.363)),
        seed=int(config.phantom.get("seed", config.seed)),
    )
    model = config.model
    kind = model.get("kind", "linear")
    common = {
        "n_views": int(model.get("views", 12)),
        "mask_fraction": float(model.get("mask_fraction", 0.5)),
        "seed": int(model.get("seed", config.seed)),
        "x_gt": phantom.values,
        "noise_snr_db": model.get("noise_snr_db"),
    }
    if kind == "linear":
        views = make_linear_views(config.grid, **common)
    elif kind == "nonlinear":
        views = make_nonlinear_views(config.grid, strength=float(model.get("strength", 0.1)), **common)
    else:
        raise ValueError(f"unknown model kind: {kind!r}")
    return phantom, views


# ---------------------------------------------------------------------------
# experiment runner


def run_experiment(config, quiet=False):
    """Run every configured solver from a shared initializer.

    Writes one trace CSV and one final volume per solver plus a summary
    table; returns the exit status (0 success, 1 on solver failure with
    partial traces flushed).
    """
    outdir = Path(config.outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    phantom, views = build_problem(config)
    x0 = solvers.default_initializer(views, config.grid, config.solver_specs[0].config.box)
    dump_volume(config.grid.to_nd(phantom.values), outdir / "phantom.vol")
    summary = []
    status = 0
    for spec in config.solver_specs:
        rows = []
        trace_path = outdir / f"{spec.label}_trace.csv"

        def stream(k, x, row, info, _rows=rows):
            _rows.append(row)

        try:
            x, trace = solvers.run_solver(
                spec.name,
                views,
                config.grid,
                spec.config,
                x0=x0.copy(),
                ground_truth=phantom.values,
                on_iteration=stream,
            )
        except Exception:
            log.exception("solver %s failed; flushing partial trace", spec.label)
            write_trace(IterationTrace(solver=spec.name, rows=rows), trace_path)
            status = 1
            continue
        write_trace(trace, trace_path)
        dump_volume(config.grid.to_nd(x), outdir / f"{spec.label}_final.vol")
        last = trace.rows[-1]
        summary.append(
            (spec.label, last.cost, last.snr_db, last.elapsed_s, last.grad_evals, last.full_grad_evals)
        )
        if not quiet:
            print(
                f"{spec.label}: cost={last.cost:.6e} snr={last.snr_db:.2f} dB "
                f"elapsed={last.elapsed_s:.2f} s grads={last.grad_evals} fullgrads={last.full_grad_evals}"
            )
    with open(outdir / "summary.txt", "w") as fh:
        fh.write("solver cost snr_db elapsed_s grad_evals full_grad_evals\n")
        for row in summary:
            fh.write(f"{row[0]} {row[1]:.17g} {row[2]:.17g} {row[3]:.6f} {row[4]} {row[5]}\n")
    if config.emit_plots and summary:
        traces = [load_trace(outdir / f"{spec.label}_trace.csv") for spec in config.solver_specs]
        emit_plots(traces, outdir)
    return status


def run_sweep(config, param, values, quiet=False):
    """Re-run the experiment once per parameter value.

    ``param`` is any solver option key (e.g. K_s, gamma); traces carry the
    value in their label.
    """
    key = param.lower()
    if key not in _SOLVER_KEYS:
        raise ValueError(f"unknown sweep parameter: {param!r}")
    field_name = _SOLVER_KEYS[key]
    status = 0
    for value in values:
        specs = []
        for spec in config.solver_specs:
            cfg = SolverConfig(
                **{
                    **{f: getattr(spec.config, f) for f in spec.config.__dataclass_fields__},
                    field_name: value,
                }
            )
            specs.append(
                SolverSpec(name=spec.name, label=f"{spec.label}_{param}={value}", config=cfg)
            )
        sub = ExperimentConfig(
            name=f"{config.name}_{param}={value}",
            outdir=config.outdir,
            seed=config.seed,
            grid=config.grid,
            phantom=config.phantom,
            model=config.model,
            solver_specs=specs,
            emit_plots=config.emit_plots,
        )
        status = max(status, run_experiment(sub, quiet=quiet))
    return status


# ---------------------------------------------------------------------------
# CLI


def _parse_value(text):
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            continue
    return text


def build_parser():
    parser = argparse.ArgumentParser(prog="tvqn", description="TV-regularized reconstruction experiments")
    parser.add_argument("--quiet", action="store_true", help="suppress progress output")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run an experiment configuration")
    p_run.add_argument("config", help="TOML experiment file")
    p_run.add_argument("--outdir", help="override the output directory")
    p_run.add_argument("--seed", type=int, help="override the experiment seed")

    p_sweep = sub.add_parser("sweep", help="run an experiment over a parameter range")
    p_sweep.add_argument("config", help="TOML experiment file")
    p_sweep.add_argument(
        "--param", required=True, help="sweep specification, e.g. K_s=1,2,4,6"
    )
    p_sweep.add_argument("--outdir", help="override the output directory")
    p_sweep.add_argument("--seed", type=int, help="override the experiment seed")

    p_plot = sub.add_parser("plot", help="plot one or more trace CSV files")
    p_plot.add_argument("traces", nargs="+", help="trace CSV files")
    p_plot.add_argument("--outdir", default=".", help="plot output directory")
    return parser


def _load_config(args):
    config = parse_config(args.config)
    if args.outdir:
        config.outdir = args.outdir
    if args.seed is not None:
        config.seed = args.seed
        for spec in config.solver_specs:
            spec.config.seed = args.seed
    return config


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO)
    try:
        if args.command == "run":
            config = _load_config(args)
        elif args.command == "sweep":
            config = _load_config(args)
        else:
            config = None
    except (OSError, ValueError, tomllib.TOMLDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2

    if args.command == "run":
        return run_experiment(config, quiet=args.quiet)
    if args.command == "sweep":
        try:
            param, _, rest = args.param.partition("=")
            values = [_parse_value(v) for v in rest.split(",") if v]
            if not param or not values:
                raise ValueError(f"malformed sweep specification: {args.param!r}")
        except ValueError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 2
        return run_sweep(config, param, values, quiet=args.quiet)
    # plot
    try:
        traces = [load_trace(p) for p in args.traces]
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    emit_plots(traces, args.outdir)
    return 0


if __name__ == "__main__":
    sys.exit(main())
