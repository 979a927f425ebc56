"""
The invariant suite run by `--mode verify`, on the reduced grid of the verify block.

Each check returns (passed, details); the suite aggregates them into an AuditReport and prints a
summary table.
"""

import dataclasses
import logging

import numpy as np
import termcolor as tc
from scipy import stats

from pkin.analysis import AuditReport, audit_periodic, fit_decay
from pkin.collision import asymmetry, coercivity_constant, cutoff_scaling_exponent
from pkin.config import RunSpec
from pkin.equilibria import WALLS, BoundarySource, DiffuseWall, WallModel, discrete_flux, sqrt_maxwellian
from pkin.errors import ConfigurationError, FitInvalidError, PkinError
from pkin.geometry import SlabShape, escape_curve, make_shape, sample_reflected_velocity
from pkin.runner import OutputBundle, build_collision, build_grid, build_problem
from pkin.solvers import (
    damped_contraction_factor,
    evolve_ivp,
    evolve_picard_check,
    iteration_lemma_check,
    make_bump,
    solve_damped_linear,
    solve_periodic_nonlinear,
    solve_steady,
)
from pkin.util.logging import mat_to_str
from pkin.util.managers import LoggerManager, TimerContextManager
from pkin.util.random import VERIFY, substream


FLUX_THETAS = (0.8, 1.0, 1.25)
CUTOFF_MS = (1.0, 0.5, 0.25)
ESCAPE_KS = (1, 2, 4, 8)
SHADOW_DELTA = 0.02


def verify_spec(spec: RunSpec) -> RunSpec:
    """The run spec with grid, budget and period resolution taken from the verify block."""
    v = spec.verify
    model = dataclasses.replace(
        spec.model,
        budget=v.budget,
        stencil=min(spec.model.stencil, v.budget),
        max_budget=max(spec.model.max_budget, v.budget),
    )
    grid = dataclasses.replace(spec.grid, v_max=v.v_max, n_per_axis=v.n_per_axis, n_space=v.n_space)
    solver = dataclasses.replace(spec.solver, period_steps=v.period_steps)
    return dataclasses.replace(spec, model=model, grid=grid, solver=solver)


def _with_walls(spec: RunSpec, delta1: float, delta2: float, collision: str = "bgk") -> RunSpec:
    wall = dataclasses.replace(spec.wall, delta1=delta1, theta_bar_left=1.0 + delta2, theta_bar_right=1.0 - delta2)
    return dataclasses.replace(spec, wall=wall, model=dataclasses.replace(spec.model, collision=collision))


def check_flux_normalization(spec: RunSpec) -> tuple[bool, dict]:
    grid = build_grid(spec)
    walls = DiffuseWall(grid, WallModel())
    errors = {}
    for theta in FLUX_THETAS:
        fluxes = [discrete_flux(grid, walls.wall_maxwellian_hat(theta, w), w.normal, "in") for w in WALLS]
        errors[str(theta)] = max(abs(f - 1.0) for f in fluxes)
    raw_error = max(abs(walls.mu_flux(w) - 1.0) for w in WALLS)
    return max(errors.values()) <= 1e-3, {"normalized_flux_error": errors, "raw_mu_flux_error": raw_error}


def check_operator_structure(spec: RunSpec) -> tuple[bool, dict]:
    full = dataclasses.replace(spec, model=dataclasses.replace(spec.model, collision="full"))
    model = build_collision(full, build_grid(full))
    sqrt_mu = sqrt_maxwellian(model.grid.nodes)
    nu_sqrt_mu = model.nu * sqrt_mu
    null_error = float(np.max(np.abs(model.gain(sqrt_mu) - nu_sqrt_mu) / nu_sqrt_mu))
    E = model.projector.raw.T
    invariant_error = max(
        float(np.linalg.norm(model.apply_L(e)) / np.linalg.norm(model.nu * e)) for e in E
    )
    sym = asymmetry(model.k_matrix)
    probe = coercivity_constant(model, seed=spec.run.seed, refine=False)
    refined = coercivity_constant(model, seed=spec.run.seed, refine=True)
    details = {
        "null_relative_error": null_error,
        "invariant_residual": invariant_error,
        "asymmetry": sym,
        "coercivity_probe": probe,
        "coercivity_refined": refined,
        "diagnostics": {k: v for k, v in model.diagnostics.items() if k != "budget_history"},
    }
    passed = null_error <= 0.02 and invariant_error <= 0.02 and sym <= 1e-12
    if model.gamma >= 0:
        passed = passed and probe > 0
    return passed, details


def check_cutoff_scaling(spec: RunSpec) -> tuple[bool, dict]:
    model = spec.model
    slope, norms = cutoff_scaling_exponent(
        build_grid(spec), model.gamma, CUTOFF_MS, model.b, model.budget, spec.run.seed, model.workers
    )
    target = 3.0 + model.gamma
    return abs(slope - target) <= 0.7, {"exponent": slope, "target": target, "norms": norms, "ms": list(CUTOFF_MS)}


def check_back_time_cycles(spec: RunSpec) -> tuple[bool, dict]:
    shape = make_shape(spec.grid.domain, spec.grid.slab_length, spec.grid.levelset)
    rng = substream(spec.run.seed, VERIFY, 0)
    x = np.zeros(3) if isinstance(shape, SlabShape) else shape.sample_boundary(1, rng)[0]
    v = sample_reflected_velocity(shape, x, rng, size=100000)
    normal_speed = v @ shape.normal(x)
    ks = stats.kstest(normal_speed, "rayleigh")
    curve = escape_curve(shape, ESCAPE_KS, 2.0 * shape.scale, n_samples=2000, seed=spec.run.seed)
    decreasing = all(
        a["estimate"] - b["estimate"] > 2.0 * np.hypot(a["stderr"], b["stderr"]) for a, b in zip(curve, curve[1:])
    )
    passed = ks.pvalue >= 0.01 and decreasing
    return passed, {"ks_statistic": float(ks.statistic), "ks_pvalue": float(ks.pvalue), "escape_curve": curve}


def check_damped_contraction(spec: RunSpec) -> tuple[bool, dict]:
    problem = build_problem(_with_walls(spec, SHADOW_DELTA, 0.0))
    source = BoundarySource(problem.walls)
    dt = problem.wall_model.period_T / spec.solver.period_steps

    def r(wall, n):
        return source.on_grid((n % spec.solver.period_steps) * dt, wall)

    details = {}
    passed = True
    for j, limit in ((4, 0.85), (16, 0.95)):
        solution = solve_damped_linear(problem, spec.solver, None, r, j=j, epsilon=0.1, lam=0.0)
        ratio = solution.trace.contraction_ratio()
        details[f"j={j}"] = {"observed": ratio, "continuum_factor": damped_contraction_factor(j), "limit": limit}
        # fewer than three nonzero differences means the iteration converged outright
        passed = passed and (ratio is None or ratio <= limit)
    return passed, details


def _periodic(spec: RunSpec, delta1: float, delta2: float, collision: str = "bgk"):
    problem = build_problem(_with_walls(spec, delta1, delta2, collision))
    steady = solve_steady(problem, spec.solver)
    return problem, steady, solve_periodic_nonlinear(problem, spec.solver, steady)


def check_periodic_shadow(spec: RunSpec) -> tuple[bool, dict]:
    problem, steady, periodic = _periodic(spec, SHADOW_DELTA, SHADOW_DELTA)
    audit = audit_periodic(periodic, steady.state, problem.grid, spec.solver.picard_tol)
    _, _, halved = _periodic(spec, 0.5 * SHADOW_DELTA, SHADOW_DELTA)
    ratio = periodic.weighted_sup / halved.weighted_sup if halved.weighted_sup > 0 else float("inf")
    linear = abs(ratio - 2.0) <= 0.25 * 2.0
    details = {"audit": audit.to_dict(), "halving_ratio": ratio, "periodic": periodic.summary()}
    return audit.all_passed and linear, details


def check_periodic_shadow_full(spec: RunSpec) -> tuple[bool, dict]:
    """The periodic audit with the full collision operator in place of the surrogate."""
    problem, steady, periodic = _periodic(spec, SHADOW_DELTA, SHADOW_DELTA, collision="full")
    audit = audit_periodic(periodic, steady.state, problem.grid, spec.solver.picard_tol)
    return audit.all_passed, {"audit": audit.to_dict(), "periodic": periodic.summary()}


def check_degeneration(spec: RunSpec) -> tuple[bool, dict]:
    tol = 10.0 * spec.solver.picard_tol
    _, _, trivial = _periodic(spec, 0.0, 0.0)
    _, _, stationary = _periodic(spec, 0.0, SHADOW_DELTA)
    details = {"zero_walls_sup": trivial.weighted_sup, "stationary_walls_sup": stationary.weighted_sup}
    return trivial.weighted_sup <= tol and stationary.weighted_sup <= tol, details


def check_evolution(spec: RunSpec) -> tuple[bool, dict]:
    problem, steady, periodic = _periodic(spec, SHADOW_DELTA, SHADOW_DELTA)
    amplitude = spec.solver.bump_amplitude
    bump = make_bump(problem, amplitude)
    single = evolve_ivp(problem, spec.solver, periodic, bump, horizon_periods=2, steady=steady)
    double = evolve_ivp(problem, spec.solver, periodic, 2.0 * bump, horizon_periods=2, steady=steady)
    sup1, sup2 = single.series["weighted_sup_norm"], double.series["weighted_sup_norm"]
    early = slice(1, spec.solver.period_steps // 4 + 1)
    doubling = float(np.max(np.abs(sup2[early] / sup1[early] - 2.0) / 2.0))
    picard = evolve_picard_check(problem, spec.solver, periodic, bump, steady=steady)
    details = {"initial": float(sup1[0]), "final": float(sup1[-1]), "doubling_error": doubling, "picard": picard}
    try:
        details["decay_fit"] = fit_decay(single.series["t"], sup1, period=problem.wall_model.period_T).to_dict()
    except FitInvalidError as e:
        details["decay_fit"] = str(e)
    return sup1[-1] < sup1[0] and doubling <= 0.3 and picard["agrees"], details


def check_iteration_lemma(spec: RunSpec) -> tuple[bool, dict]:
    rng = substream(spec.run.seed, VERIFY, 1)
    certified, detected = 0, 0
    n_sequences = 1000
    for _ in range(n_sequences):
        k = int(rng.integers(0, 4))
        D = 0.0 if rng.random() < 0.5 else 0.1 * rng.random()
        a = np.zeros(40)
        a[: k + 1] = rng.random(k + 1)
        for i in range(len(a) - k - 1):
            a[i + 1 + k] = rng.random() * (a[i : i + k + 1].max() / 8.0 + D)
        check = iteration_lemma_check(a, k, D)
        certified += check.hypothesis_holds and check.conclusion_holds

        j = int(rng.integers(k + 1, len(a)))
        bad = a.copy()
        bad[j] = 2.0 * (bad[j - 1 - k : j].max() / 8.0 + D) + 1.0
        detected += iteration_lemma_check(bad, k, D).violation_index == j - 1 - k
    details = {"sequences": n_sequences, "certified": certified, "violations_detected": detected}
    return certified == n_sequences and detected == n_sequences, details


CHECKS = {
    "flux_normalization": check_flux_normalization,
    "operator_structure": check_operator_structure,
    "cutoff_scaling": check_cutoff_scaling,
    "back_time_cycles": check_back_time_cycles,
    "damped_contraction": check_damped_contraction,
    "periodic_shadow": check_periodic_shadow,
    "periodic_shadow_full": check_periodic_shadow_full,
    "degeneration": check_degeneration,
    "evolution": check_evolution,
    "iteration_lemma": check_iteration_lemma,
}


def selected_checks(spec: RunSpec) -> list[str]:
    """Check names from verify.checks, a comma-separated list or "all"."""
    if spec.verify.checks.strip() == "all":
        return list(CHECKS)
    names = [name.strip() for name in spec.verify.checks.split(",") if name.strip()]
    unknown = [name for name in names if name not in CHECKS]
    if unknown or not names:
        raise ConfigurationError(f"unknown verify.checks {unknown or names}, expected names from {list(CHECKS)}")
    return names


def run_suite(spec: RunSpec, bundle: OutputBundle, only=None) -> AuditReport:
    vspec = verify_spec(spec)
    only = selected_checks(spec) if only is None else only
    report = AuditReport()
    rows = [["check", "result", "time"], ["*"] * 3]
    for name, check in CHECKS.items():
        if name not in only:
            continue
        with TimerContextManager(f"check {name}") as timer:
            try:
                with LoggerManager(logging.WARNING):
                    passed, details = check(vspec)
            except PkinError as e:
                passed, details = False, {"error": f"{type(e).__name__}: {e}"}
        report.add(name, details, passed)
        verdict = tc.colored("pass", "green") if passed else tc.colored("FAIL", "red")
        rows.append([name, verdict, f"{timer.get_time():.1f}s"])
    logging.info("Verify summary:\n" + mat_to_str(rows))
    bundle.add("verify", report.seal().to_dict())
    return report
