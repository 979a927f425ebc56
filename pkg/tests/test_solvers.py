import logging

import numpy as np
import pytest

from pkin.equilibria import BoundarySource
from pkin import solvers
from pkin.equilibria import WallModel
from pkin.errors import AmplitudeGuardError, ConfigurationError, ConvergenceError, GuardError
from pkin.solvers import (
    IterateRecord,
    IterationTrace,
    SlabProblem,
    anchor_mass,
    check_small_data,
    damped_contraction_factor,
    evolve_ivp,
    iteration_lemma_check,
    make_bump,
    solve_damped_linear,
    solve_linear_periodic,
    solve_periodic_nonlinear,
    solve_steady,
)
from pkin.transport import slab_mass
from tests.fixtures import N_SPACE, PERIOD_STEPS, bgk, slab_problem, solver_config, solver_grid, weight_spec


@pytest.fixture(scope="module")
def periodic_run():
    problem = slab_problem()
    solver = solver_config()
    steady = solve_steady(problem, solver)
    return problem, solver, steady, solve_periodic_nonlinear(problem, solver, steady)


@pytest.mark.parametrize(
    "kwargs",
    [
        {"epsilon_schedule": (0.1, 0.1, 0.0)},
        {"lambda_schedule": (0.0, 0.5)},
        {"j_schedule": (1, 4)},
        {"picard_tol": 0.0},
        {"strategy": "newton"},
        {"small_data_guard": 0.0},
        {"coarse_modes": -1},
    ],
)
def test_solver_config_validation(kwargs):
    with pytest.raises(ConfigurationError):
        solver_config(**kwargs)


def test_damped_contraction_factor():
    assert damped_contraction_factor(4) == 0.59375
    assert damped_contraction_factor(16) < 1.0


def test_small_data_guard(caplog):
    check_small_data("wall.delta1", 0.05, solver_config())
    with pytest.raises(GuardError):
        check_small_data("wall.delta1", 0.1, solver_config())
    with caplog.at_level(logging.WARNING):
        check_small_data("wall.delta1", 0.1, solver_config(allow_large_data=True))
    assert "allow_large_data" in caplog.text


def test_anchor_mass():
    problem = slab_problem()
    f = np.random.default_rng(0).normal(size=problem.shape)
    anchored, removed = anchor_mass(f, problem)
    assert removed == pytest.approx(slab_mass(f, problem.grid, problem.dx))
    assert slab_mass(anchored, problem.grid, problem.dx) == pytest.approx(0.0, abs=1e-12 * problem.l1_mass_scale(f))


def test_contraction_ratio():
    trace = IterationTrace("t")
    for diff in (None, 1.0, 0.5, 0.25, 0.125):
        trace.append(IterateRecord(1.0, 1.0, diff, 0.0))
    assert trace.contraction_ratio() == pytest.approx(0.5)
    assert trace.to_dict()["iterations"] == 5
    short = IterationTrace("s", [IterateRecord(1.0, 1.0, 1.0, 0.0), IterateRecord(1.0, 1.0, 0.5, 0.0)])
    assert short.contraction_ratio() is None


def test_degeneration_to_zero():
    problem = slab_problem(delta1=0.0, delta2=0.0)
    solution = solve_periodic_nonlinear(problem, solver_config())
    assert solution.weighted_sup == 0.0
    assert solution.stability_constant is None


def test_guard_rejects_large_oscillation():
    with pytest.raises(GuardError):
        solve_periodic_nonlinear(slab_problem(delta1=0.08), solver_config())


def test_periodic_solution(periodic_run):
    problem, solver, steady, periodic = periodic_run
    assert steady.residual <= 1e-7
    assert steady.weighted_sup > 0
    assert periodic.periodicity_residual <= 10.0 * solver.picard_tol
    assert periodic.weighted_sup > 0
    assert periodic.stability_constant == pytest.approx(periodic.weighted_sup / 0.02)
    assert periodic.slices.shape == (PERIOD_STEPS // solver.snapshot_every + 1,) + problem.shape
    scale = max(problem.l1_mass_scale(s) for s in periodic.slices)
    assert np.max(np.abs(periodic.slice_mass)) <= 1e-8 * max(scale, 1.0)
    assert len(periodic.series["t"]) == PERIOD_STEPS + 1
    summary = periodic.summary()
    assert summary["iterations"] == len(periodic.trace.records)


def test_periodic_solution_scales_with_oscillation(periodic_run):
    problem, solver, steady, periodic = periodic_run
    halved = solve_periodic_nonlinear(slab_problem(delta1=0.01), solver, steady)
    assert periodic.weighted_sup / halved.weighted_sup == pytest.approx(2.0, rel=0.25)


def test_nested_strategy_matches_direct(periodic_run):
    problem, solver, steady, periodic = periodic_run
    nested = solve_periodic_nonlinear(problem, solver_config(strategy="nested"), steady)
    assert np.max(np.abs(nested.slices[0] - periodic.slices[0])) <= 1e-6


def _boundary_source(problem):
    source = BoundarySource(problem.walls)
    dt = 1.0 / PERIOD_STEPS

    def r(wall, n):
        return source.on_grid((n % PERIOD_STEPS) * dt, wall)

    return r


def test_nested_linear_stages():
    problem = slab_problem()
    r = _boundary_source(problem)
    direct = solve_linear_periodic(problem, solver_config(), r=r)
    nested = solve_linear_periodic(problem, solver_config(strategy="nested"), r=r)
    assert len(nested.stages) == 3 + 5 + 3
    assert nested.stages[0]["continuum_factor"] == damped_contraction_factor(4)
    assert np.max(np.abs(nested.state - direct.state)) <= 1e-6


def test_damped_linear_arguments():
    problem = slab_problem()
    with pytest.raises(ConfigurationError):
        solve_damped_linear(problem, solver_config(), j=1)
    with pytest.raises(ConfigurationError):
        solve_damped_linear(problem, solver_config(), epsilon=0.0)


def test_make_bump():
    problem = slab_problem()
    bump = make_bump(problem, 0.01)
    assert problem.sup(bump) == pytest.approx(0.01)
    assert slab_mass(bump, problem.grid, problem.dx) == pytest.approx(0.0, abs=1e-14)


def test_evolution_decays(periodic_run):
    problem, solver, steady, periodic = periodic_run
    result = evolve_ivp(problem, solver, periodic, make_bump(problem, 0.01), horizon_periods=2, steady=steady)
    sup = result.series["weighted_sup_norm"]
    assert len(sup) == 2 * PERIOD_STEPS + 1
    assert sup[-1] < sup[0]
    assert result.mass_drift <= 1e-12
    assert set(result.summary()) == {"steps", "initial_weighted_sup", "final_weighted_sup", "mass_drift"}


def test_evolution_guard(periodic_run):
    problem, solver, steady, periodic = periodic_run
    with pytest.raises(GuardError):
        evolve_ivp(problem, solver, periodic, make_bump(problem, 0.2), steady=steady)


def test_iteration_lemma_geometric_sequence():
    check = iteration_lemma_check(0.125 ** np.arange(12), k=0)
    assert check.hypothesis_holds and check.conclusion_holds
    assert check.violation_index is None
    zeros = iteration_lemma_check(np.zeros(10), k=2, D=0.0)
    assert zeros.hypothesis_holds and zeros.conclusion_holds


def test_iteration_lemma_with_forcing():
    rng = np.random.default_rng(0)
    for k in range(4):
        a = np.zeros(30)
        a[: k + 1] = rng.random(k + 1)
        for i in range(len(a) - k - 1):
            a[i + 1 + k] = rng.random() * (a[i : i + k + 1].max() / 8.0 + 0.05)
        check = iteration_lemma_check(a, k, 0.05)
        assert check.hypothesis_holds and check.conclusion_holds


def test_iteration_lemma_detects_violation():
    check = iteration_lemma_check([1.0, 0.1, 0.5, 0.0], k=0)
    assert not check.hypothesis_holds
    assert check.violation_index == 1


def test_iteration_lemma_decay_variant():
    check = iteration_lemma_check(np.zeros(8), k=1, decay=(1.0, 0.9))
    assert check.hypothesis_holds and check.conclusion_holds
    assert iteration_lemma_check([0.5], k=2).conclusion_holds


@pytest.mark.parametrize(
    "args",
    [([1.0, -0.1], 0, 0.0, None), ([1.0], -1, 0.0, None), ([1.0], 0, -1.0, None), ([1.0], 0, 0.0, (1.0, 0.2))],
)
def test_iteration_lemma_arguments(args):
    sequence, k, D, decay = args
    with pytest.raises(ConfigurationError):
        iteration_lemma_check(sequence, k, D, decay)


def test_weight_must_match_operator():
    with pytest.raises(ConfigurationError):
        SlabProblem(solver_grid(), bgk(1.0), WallModel(), weight_spec(-1.0), n_space=N_SPACE)


def test_plain_picard_stalls_on_the_energy_mode():
    with pytest.raises(ConvergenceError):
        solve_steady(slab_problem(), solver_config(coarse_modes=0, max_picard=30))


def test_coarse_correction_converges():
    solver = solver_config()
    steady = solve_steady(slab_problem(), solver)
    assert steady.residual <= 1e-7
    # three velocity profiles times one cosine per cell
    assert steady.trace.coarse_maps == 3 * N_SPACE
    assert len(steady.trace.records) < solver.max_picard
    assert steady.trace.to_dict()["coarse_maps"] == 3 * N_SPACE


def test_coarse_space_is_orthonormal():
    problem = slab_problem()
    coarse = solvers.CoarseSpace(problem, 4)
    assert coarse.shape == (4, 3)
    gram = np.array([coarse.project(coarse.vector(e)) for e in np.eye(coarse.size)])
    assert np.allclose(gram, np.eye(coarse.size), atol=1e-12)
    assert not coarse.assembled


def test_damped_linear_without_data_is_zero():
    solution = solve_damped_linear(slab_problem(), solver_config(), None, None, j=4, epsilon=0.1, lam=0.0)
    assert solution.weighted_sup == 0.0
    assert len(solution.trace.records) <= 2


def test_linear_periodic_doubles_with_data():
    problem = slab_problem()
    r = _boundary_source(problem)
    single = solve_linear_periodic(problem, solver_config(), r=r)
    double = solve_linear_periodic(problem, solver_config(), r=lambda wall, n: 2.0 * r(wall, n))
    assert np.max(np.abs(double.slices - 2.0 * single.slices)) <= 1e-8 * np.max(np.abs(2.0 * single.slices))


def test_stability_constant_across_epsilon_schedule():
    problem = slab_problem()
    nested = solve_linear_periodic(problem, solver_config(strategy="nested"), r=_boundary_source(problem))
    constants = [stage["C"] for stage in nested.stages if stage["lambda"] == 1.0 and stage["j"] is None]
    assert len(constants) == 1 + 3
    assert max(constants) / min(constants) <= 1.25


def test_steady_vanishes_at_unit_temperature():
    steady = solve_steady(slab_problem(delta1=0.0, delta2=0.0), solver_config())
    assert steady.weighted_sup <= 1e-14


def test_steady_scales_with_temperature_gap():
    solver = solver_config()
    large = solve_steady(slab_problem(delta2=0.02), solver)
    small = solve_steady(slab_problem(delta2=0.01), solver)
    assert large.weighted_sup / small.weighted_sup == pytest.approx(2.0, rel=0.25)


@pytest.mark.parametrize("strategy", ["direct", "nested"])
def test_amplitude_guard(monkeypatch, periodic_run, strategy):
    problem, _, steady, periodic = periodic_run
    assert periodic.amplitude_limit == pytest.approx(10.0 * periodic.linear_stability_constant * 0.02)
    assert periodic.weighted_sup <= periodic.amplitude_limit
    monkeypatch.setattr(solvers, "AMPLITUDE_FACTOR", 1e-3)
    with pytest.raises(AmplitudeGuardError):
        solve_periodic_nonlinear(problem, solver_config(strategy=strategy), steady)


def test_soft_potential_decays_slower():
    solver = solver_config()
    mid = PERIOD_STEPS
    ratios = {}
    for gamma in (1.0, -1.0):
        problem = slab_problem(delta1=0.0, delta2=0.0, gamma=gamma)
        steady = solve_steady(problem, solver)
        periodic = solve_periodic_nonlinear(problem, solver, steady)
        result = evolve_ivp(problem, solver, periodic, make_bump(problem, 0.01), horizon_periods=2, steady=steady)
        sup = result.series["weighted_sup_norm"]
        assert sup[-1] < sup[0]
        ratios[gamma] = sup[mid] / sup[0]
    assert ratios[-1.0] > ratios[1.0]


@pytest.fixture(scope="module")
def full_run():
    problem = slab_problem(full=True)
    solver = solver_config()
    steady = solve_steady(problem, solver)
    return problem, solver, steady, solve_periodic_nonlinear(problem, solver, steady)


def test_periodic_solution_with_full_operator(full_run):
    problem, solver, steady, periodic = full_run
    assert steady.residual <= 1e-7
    assert periodic.periodicity_residual <= 10.0 * solver.picard_tol
    assert 0 < periodic.weighted_sup <= periodic.amplitude_limit
    scale = max(problem.l1_mass_scale(s) for s in periodic.slices)
    assert np.max(np.abs(periodic.slice_mass)) <= 1e-8 * max(scale, 1.0)


def test_evolution_with_full_operator(full_run):
    problem, solver, steady, periodic = full_run
    result = evolve_ivp(problem, solver, periodic, make_bump(problem, 0.01), horizon_periods=2, steady=steady)
    sup = result.series["weighted_sup_norm"]
    assert sup[-1] < sup[0]
    assert result.mass_drift <= 1e-10
