"""
Mode dispatch and output emission: report.json, series.csv and field snapshots.
"""

import dataclasses
import json
import logging
import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import pandas as pd
import scipy
import termcolor as tc

from pkin import __version__
from pkin.analysis import AuditReport, audit_periodic, fit_decay, rho_target
from pkin.collision import BgkSurrogate, build_collision_model
from pkin.config import RunSpec, render_spec
from pkin.equilibria import WallModel
from pkin.errors import ArtifactMissingError, AuditFailure, ConfigurationError, FitInvalidError, PkinError
from pkin.kernel_cache import CacheKey, read_matrix, write_matrix
from pkin.solvers import (
    IterationTrace,
    PeriodicSolution,
    SlabProblem,
    SteadySolution,
    check_small_data,
    evolve_ivp,
    make_bump,
    solve_periodic_nonlinear,
    solve_steady,
)
from pkin.transport import WallTrace, slab_mass
from pkin.util.managers import TimerContextManager
from pkin.vgrid import DistributionField, VelocityGrid, WeightSpec, build_velocity_grid


SERIES_COLUMNS = ["t", "weighted_sup_norm", "l2_norm", "boundary_norm", "mass_moment"]
STEADY_FIELD = "steady-field.bin"
PERIODIC_FIELD = "periodic-field.bin"


def _to_builtin(value):
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.generic):
        return value.item()
    if hasattr(value, "to_dict"):
        return value.to_dict()
    if hasattr(value, "value"):
        return value.value
    raise TypeError(f"cannot serialize {type(value).__name__}")


@dataclass
class OutputBundle:
    """report.json and series.csv under one output directory."""

    directory: str
    report: dict = field(default_factory=dict)
    sealed: bool = False

    def __post_init__(self):
        os.makedirs(self.directory, exist_ok=True)

    def path(self, name: str) -> str:
        return os.path.join(self.directory, name)

    def add(self, key: str, value):
        if self.sealed:
            raise PkinError(f"output bundle in {self.directory} is sealed")
        self.report[key] = value

    def write_series(self, series: dict):
        frame = pd.DataFrame({name: np.asarray(series[name], dtype=float) for name in SERIES_COLUMNS})
        path = self.path("series.csv")
        frame.to_csv(path, index=False, float_format="%.17g", lineterminator="\n")
        logging.info(f"Wrote {len(frame)} rows to {tc.colored(path, 'blue')}")

    def seal(self):
        path = self.path("report.json")
        with open(path, "w") as f:
            json.dump(self.report, f, indent=2, sort_keys=True, default=_to_builtin)
            f.write("\n")
        self.sealed = True
        logging.info(f"Wrote report to {tc.colored(path, 'blue')}")


def _field_key(spec: RunSpec) -> CacheKey:
    model, grid, wall = spec.model, spec.grid, spec.wall
    setting = (
        wall.delta1,
        wall.theta_bar_left,
        wall.theta_bar_right,
        wall.period_T,
        wall.shape,
        grid.n_space,
        grid.slab_length,
        model.collision,
    )
    key = CacheKey(model.gamma, grid.v_max, grid.n_per_axis, model.m, spec.solver.period_steps, spec.run.seed)
    return dataclasses.replace(key, tag=int(key.digest(*setting), 16))


def write_field(path: str, values: np.ndarray, spec: RunSpec) -> None:
    values = np.asarray(values, dtype=float)
    write_matrix(path, values.reshape(-1, values.shape[-1]), _field_key(spec))
    logging.info(f"Stored field snapshot {values.shape} at {tc.colored(path, 'blue')}")


def read_field(path: str, spec: RunSpec, what: str) -> np.ndarray:
    if not os.path.exists(path):
        raise ArtifactMissingError(f"{what} artifact {path} not found; run --mode periodic with the same --out first")
    matrix, key = read_matrix(path)
    expected = _field_key(spec)
    if key != expected:
        raise ConfigurationError(f"{path} was written for {key}, the current spec needs {expected}")
    n_space = spec.grid.n_space
    if matrix.shape[0] % n_space:
        raise ConfigurationError(f"{path} holds {matrix.shape[0]} rows, not a multiple of grid.n_space = {n_space}")
    return matrix.reshape(-1, n_space, matrix.shape[1])


def build_grid(spec: RunSpec) -> VelocityGrid:
    return build_velocity_grid(spec.grid.v_max, spec.grid.n_per_axis)


def build_weight(spec: RunSpec) -> WeightSpec:
    return WeightSpec(spec.model.q, spec.model.beta, spec.model.gamma)


def build_collision(spec: RunSpec, grid: VelocityGrid):
    model = spec.model
    match model.collision:
        case "bgk":
            return BgkSurrogate(grid, model.gamma, model.b)
        case "full":
            with TimerContextManager("building the collision model"):
                return build_collision_model(
                    grid,
                    gamma=model.gamma,
                    b=model.b,
                    m_cutoff=model.m,
                    budget=model.budget,
                    seed=spec.run.seed,
                    stencil=model.stencil,
                    max_asymmetry=model.max_asymmetry,
                    max_budget=model.max_budget,
                    workers=model.workers,
                    cache_dir=spec.run.cache_dir or None,
                )
        case _:
            raise ConfigurationError(f"unknown model.collision {model.collision!r}, expected 'bgk' or 'full'")


def build_problem(spec: RunSpec) -> SlabProblem:
    if spec.grid.domain != "slab":
        raise ConfigurationError("the kinetic solvers run on grid.domain = slab only")
    wall = spec.wall
    wall_model = WallModel(wall.period_T, wall.theta_bar_left, wall.theta_bar_right, wall.delta1, wall.shape)
    weight = build_weight(spec)
    grid = build_grid(spec)
    return SlabProblem(grid, build_collision(spec, grid), wall_model, weight, spec.grid.n_space, spec.grid.slab_length)


def _delta2(spec: RunSpec) -> float:
    return max(abs(spec.wall.theta_bar_left - 1.0), abs(spec.wall.theta_bar_right - 1.0))


def _check_guards(spec: RunSpec):
    # before WallModel validation, so oversized amplitudes surface as guard errors
    check_small_data("wall.delta1", spec.wall.delta1, spec.solver)
    check_small_data("wall.delta2", _delta2(spec), spec.solver)


def _run_steady(spec: RunSpec, bundle: OutputBundle):
    check_small_data("wall.delta2", _delta2(spec), spec.solver)
    problem = build_problem(spec)
    steady = solve_steady(problem, spec.solver)
    write_field(bundle.path(STEADY_FIELD), steady.state[None], spec)
    bundle.add("collision", problem.collision.summary())
    bundle.add("steady", steady.summary())
    bundle.add("iteration_traces", [steady.trace.to_dict()])
    bundle.write_series(steady.series)


def _run_periodic(spec: RunSpec, bundle: OutputBundle):
    _check_guards(spec)
    problem = build_problem(spec)
    steady = solve_steady(problem, spec.solver)
    periodic = solve_periodic_nonlinear(problem, spec.solver, steady)
    write_field(bundle.path(STEADY_FIELD), steady.state[None], spec)
    write_field(bundle.path(PERIODIC_FIELD), periodic.slices, spec)
    audit = audit_periodic(periodic, steady.state, problem.grid, spec.solver.picard_tol)
    bundle.add("collision", problem.collision.summary())
    bundle.add("steady", steady.summary())
    bundle.add("periodic", periodic.summary())
    bundle.add("audit", audit.to_dict())
    bundle.add("iteration_traces", [steady.trace.to_dict(), periodic.trace.to_dict()])
    bundle.write_series(periodic.series)
    return audit


def _load_solutions(spec: RunSpec, problem: SlabProblem, bundle: OutputBundle):
    f_star = read_field(bundle.path(STEADY_FIELD), spec, "steady")[0]
    slices = read_field(bundle.path(PERIODIC_FIELD), spec, "periodic")
    steady = SteadySolution(f_star, float("nan"), problem.sup(f_star), 0.0, IterationTrace("loaded"), {})
    periodic = PeriodicSolution(
        history=DistributionField(slices, problem.grid, problem.dx),
        periodicity_residual=problem.sup(slices[-1] - slices[0]),
        weighted_sup=problem.sup(slices),
        slice_mass=np.array([slab_mass(s, problem.grid, problem.dx) for s in slices]),
        trace=IterationTrace("loaded"),
        traces=WallTrace(),
    )
    logging.info(f"Loaded {len(slices)} periodic slices from {tc.colored(bundle.directory, 'blue')}")
    return steady, periodic


def _run_evolve(spec: RunSpec, bundle: OutputBundle):
    for name, what in ((STEADY_FIELD, "steady"), (PERIODIC_FIELD, "periodic")):
        if not os.path.exists(bundle.path(name)):
            raise ArtifactMissingError(
                f"{what} artifact {bundle.path(name)} not found; run --mode periodic with the same --out first"
            )
    _check_guards(spec)
    problem = build_problem(spec)
    steady, periodic = _load_solutions(spec, problem, bundle)
    f0 = make_bump(problem, spec.solver.bump_amplitude)
    result = evolve_ivp(problem, spec.solver, periodic, f0, steady=steady)
    bundle.add("collision", problem.collision.summary())
    bundle.add("evolve", result.summary())
    bundle.add("rho_target", rho_target(spec.model.gamma))
    bundle.write_series(result.series)


def _run_fit_decay(spec: RunSpec, bundle: OutputBundle):
    path = spec.run.series or bundle.path("series.csv")
    if not os.path.exists(path):
        raise ArtifactMissingError(f"series {path} not found; run --mode evolve first")
    frame = pd.read_csv(path)
    missing = [c for c in SERIES_COLUMNS if c not in frame.columns]
    if missing:
        raise FitInvalidError(f"{path} lacks the columns {missing}")
    report_path = bundle.path("report.json")
    if os.path.exists(report_path):
        with open(report_path, "r") as f:
            bundle.report.update(json.load(f))
    fit = fit_decay(frame["t"].to_numpy(), frame["weighted_sup_norm"].to_numpy(), period=spec.wall.period_T)
    bundle.add("decay_fit", fit.to_dict())
    bundle.add("rho_target", rho_target(spec.model.gamma))
    logging.info(f"rho = {fit.rho:.4f} against target {rho_target(spec.model.gamma):.4f}")


def _run_kernel_cache(spec: RunSpec, bundle: OutputBundle):
    if not spec.run.cache_dir:
        raise ConfigurationError("kernel-cache mode needs run.cache_dir")
    full = dataclasses.replace(spec, model=dataclasses.replace(spec.model, collision="full"))
    model = build_collision(full, build_grid(full))
    bundle.add("collision", model.summary())


def _execute(spec: RunSpec, bundle: OutputBundle) -> Optional[AuditReport]:
    match spec.run.mode:
        case "steady":
            _run_steady(spec, bundle)
        case "periodic":
            return _run_periodic(spec, bundle)
        case "evolve":
            _run_evolve(spec, bundle)
        case "fit-decay":
            _run_fit_decay(spec, bundle)
        case "kernel-cache":
            _run_kernel_cache(spec, bundle)
        case "verify":
            from pkin.verify import run_suite

            return run_suite(spec, bundle)
        case _:
            raise ConfigurationError(f"unknown run.mode {spec.run.mode!r}")
    return None


def run(spec: RunSpec) -> int:
    """Runs one mode and returns the process exit code: 0 success, 1 configuration, 2 convergence,
    3 invariant or audit failure."""
    bundle = OutputBundle(spec.run.output)
    try:
        with TimerContextManager(f"mode {spec.run.mode}"):
            audit = _execute(spec, bundle)
        bundle.add("mode", spec.run.mode)
        bundle.add("seed", spec.run.seed)
        bundle.add("config", render_spec(spec))
        bundle.add("config_values", spec.to_dict())
        bundle.add(
            "versions",
            {"pkin": __version__, "numpy": np.__version__, "scipy": scipy.__version__, "pandas": pd.__version__},
        )
        bundle.seal()
        if audit is not None and not audit.all_passed:
            raise AuditFailure(f"audit failed: {', '.join(audit.failures())}")
    except PkinError as e:
        logging.error(f"{type(e).__name__}: {e}")
        return e.exit_code
    logging.info(tc.colored(f"Mode {spec.run.mode} completed", "green"))
    return 0
