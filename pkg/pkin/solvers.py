"""
Time-periodic and steady solutions of the slab problem, the nonlinear initial-boundary-value
march, and the iteration-lemma diagnostic.

Periodic problems are solved as fixed points of the period map of the slab integrator. The
default "direct" strategy runs plain Picard at eps = 0, lambda = 1 and undamped boundary; the
"nested" strategy walks the damped-boundary stages, then the lambda continuation, then the eps
schedule, warm-starting each stage from the previous one. Whenever a stage conserves mass the
iterates are mass-anchored: the total sqrt(mu)-moment is removed uniformly along sqrt(mu).

Undamped Picard loops are accelerated by a coarse correction: after a few plain maps the
response of the map along low spatial cosines times the mass, momentum and energy profiles is
assembled once, and every later iterate is corrected on that space before it is mapped. The
direct strategy first solves the linear problem, whose size per unit delta1 gives the
stability constant C, and aborts the nonlinear iteration once an iterate exceeds 10 C delta1.
"""

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from pkin.collision import CollisionOperator, SpectralProjector, linearize_around
from pkin.equilibria import WALLS, BoundarySource, DiffuseWall, Wall, WallModel, global_maxwellian, sqrt_maxwellian
from pkin.errors import AmplitudeGuardError, ConfigurationError, ConvergenceError, GuardError, MassDriftError
from pkin.transport import BoundaryCondition, SlabTransport, TransportConfig, WallTrace, slab_mass
from pkin.util.managers import TimerContextManager
from pkin.vgrid import DistributionField, VelocityGrid, WeightSpec, weighted_sup


MASS_TOLERANCE = 1e-8
PROJECTED_MASS_LIMIT = 1e-4
AMPLITUDE_FACTOR = 10.0
# plain maps before the coarse space is assembled
COARSE_AFTER = 3
COARSE_STEP = 1e-6


@dataclass(frozen=True)
class SolverConfig:
    epsilon_schedule: tuple = (1e-1, 1e-2, 1e-3, 0.0)
    lambda_schedule: tuple = (0.0, 0.25, 0.5, 0.75, 1.0)
    j_schedule: tuple = (4, 16, 64, np.inf)
    picard_tol: float = 1e-8
    max_picard: int = 200
    period_steps: int = 200
    strategy: str = "direct"
    snapshot_every: int = 10
    small_data_guard: float = 0.05
    allow_large_data: bool = False
    horizon_periods: int = 4
    bump_amplitude: float = 0.01
    transport_mode: str = "lookback"
    coarse_modes: int = 8

    def __post_init__(self):
        eps = list(self.epsilon_schedule)
        lam = list(self.lambda_schedule)
        js = list(self.j_schedule)
        if not eps or any(b >= a for a, b in zip(eps, eps[1:])) or min(eps) < 0:
            raise ConfigurationError(f"solver.epsilon_schedule must be strictly decreasing and nonnegative, got {eps}")
        if not lam or any(b <= a for a, b in zip(lam, lam[1:])) or lam[0] < 0 or lam[-1] != 1.0:
            raise ConfigurationError(f"solver.lambda_schedule must increase within [0, 1] and end at 1, got {lam}")
        if not js or any(b <= a for a, b in zip(js, js[1:])) or js[0] < 2:
            raise ConfigurationError(f"solver.j_schedule must be increasing integers >= 2, got {js}")
        if not self.picard_tol > 0:
            raise ConfigurationError(f"solver.picard_tol must be positive, got {self.picard_tol}")
        if self.max_picard < 1 or self.period_steps < 1 or self.snapshot_every < 1:
            raise ConfigurationError("solver.max_picard, solver.period_steps and solver.snapshot_every must be >= 1")
        if self.strategy not in ("direct", "nested"):
            raise ConfigurationError(f"unknown solver.strategy {self.strategy!r}, expected 'direct' or 'nested'")
        if not self.small_data_guard > 0:
            raise ConfigurationError(f"solver.small_data_guard must be positive, got {self.small_data_guard}")
        if self.coarse_modes < 0:
            raise ConfigurationError(f"solver.coarse_modes must be nonnegative, got {self.coarse_modes}")


def damped_contraction_factor(j: float) -> float:
    """Continuum contraction factor of the damped-boundary iteration."""
    return 1.0 - 2.0 / j + 3.0 / (2.0 * j * j)


def check_small_data(name: str, value: float, solver: SolverConfig) -> None:
    if value <= solver.small_data_guard:
        return
    message = f"{name} = {value} exceeds the small-data guard {solver.small_data_guard}"
    if not solver.allow_large_data:
        raise GuardError(f"{message}; set solver.allow_large_data = true to run anyway")
    logging.warning(f"{message}; continuing because solver.allow_large_data is set")


@dataclass
class SlabProblem:
    grid: VelocityGrid
    collision: CollisionOperator
    wall_model: WallModel
    spec: WeightSpec
    n_space: int = 64
    slab_length: float = 1.0
    walls: DiffuseWall = field(init=False, repr=False)

    def __post_init__(self):
        gamma = getattr(self.collision, "gamma", self.spec.gamma)
        if gamma != self.spec.gamma:
            raise ConfigurationError(f"model weight built for gamma={self.spec.gamma}, the operator has {gamma}")
        self.walls = DiffuseWall(self.grid, self.wall_model)

    @property
    def dx(self) -> float:
        return self.slab_length / self.n_space

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_space, self.grid.n_nodes)

    def zeros(self) -> np.ndarray:
        return np.zeros(self.shape)

    def stationary(self) -> "SlabProblem":
        """Same problem with the walls frozen at their mean temperatures."""
        model = self.wall_model
        frozen = WallModel(model.period_T, model.theta_bar_left, model.theta_bar_right, 0.0, model.shape)
        return SlabProblem(self.grid, self.collision, frozen, self.spec, self.n_space, self.slab_length)

    def transport(
        self,
        solver: SolverConfig,
        epsilon: float = 0.0,
        lam: float = 1.0,
        j: Optional[float] = None,
        boundary: Optional[BoundaryCondition] = None,
    ) -> SlabTransport:
        config = TransportConfig(
            dt=self.wall_model.period_T / solver.period_steps,
            n_space_cells=self.n_space,
            slab_length=self.slab_length,
            epsilon=epsilon,
            lam=lam,
            j_damping=j,
            mode=solver.transport_mode,
            period_steps=solver.period_steps,
        )
        return SlabTransport(self.grid, config, self.collision, boundary)

    def sup(self, values: np.ndarray) -> float:
        return weighted_sup(values, self.grid, self.spec)

    def l1_mass_scale(self, f: np.ndarray) -> float:
        return float(np.sum(np.abs(f) @ (sqrt_maxwellian(self.grid.nodes) * self.grid.quad_weight)) * self.dx)


def anchor_mass(f: np.ndarray, problem: SlabProblem) -> tuple[np.ndarray, float]:
    """Remove the total sqrt(mu)-moment uniformly along sqrt(mu); returns the removed mass."""
    grid = problem.grid
    total = slab_mass(f, grid, problem.dx)
    mu_mass = float(np.sum(global_maxwellian(grid.nodes) * grid.quad_weight))
    c = total / (mu_mass * problem.slab_length)
    return f - c * sqrt_maxwellian(grid.nodes)[None, :], total


@dataclass
class IterateRecord:
    weighted_sup: float
    boundary_sup: float
    difference: Optional[float]
    wall_clock: float


@dataclass
class IterationTrace:
    label: str
    records: list = field(default_factory=list)
    coarse_maps: int = 0

    def append(self, record: IterateRecord):
        self.records.append(record)
        diff = "-" if record.difference is None else f"{record.difference:.3e}"
        logging.debug(f"[{self.label}] iterate {len(self.records)}: |w f| = {record.weighted_sup:.4e}, diff = {diff}")

    @property
    def differences(self) -> list[float]:
        return [r.difference for r in self.records if r.difference is not None]

    def contraction_ratio(self) -> Optional[float]:
        """Geometric mean of consecutive difference ratios, the first difference excluded."""
        diffs = [d for d in self.differences[1:] if d > 0]
        if len(diffs) < 2:
            return None
        return float((diffs[-1] / diffs[0]) ** (1.0 / (len(diffs) - 1)))

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "iterations": len(self.records),
            "coarse_maps": self.coarse_maps,
            "contraction_ratio": self.contraction_ratio(),
            "weighted_sup": [r.weighted_sup for r in self.records],
            "boundary_sup": [r.boundary_sup for r in self.records],
            "difference": [r.difference for r in self.records],
            "wall_clock": [r.wall_clock for r in self.records],
        }


@dataclass
class PeriodicSolution:
    """Slices over one period; the first and last slice are identified."""

    history: DistributionField
    periodicity_residual: float
    weighted_sup: float
    slice_mass: np.ndarray
    trace: IterationTrace
    traces: WallTrace
    stability_constant: Optional[float] = None
    linear_stability_constant: Optional[float] = None
    amplitude_limit: Optional[float] = None
    stages: list = field(default_factory=list)
    series: dict = field(default_factory=dict, repr=False)

    @property
    def state(self) -> np.ndarray:
        return self.history.values[0]

    @property
    def slices(self) -> np.ndarray:
        return self.history.values

    def summary(self) -> dict:
        return {
            "periodicity_residual": self.periodicity_residual,
            "weighted_sup_norm": self.weighted_sup,
            "max_slice_mass": float(np.max(np.abs(self.slice_mass), initial=0.0)),
            "stability_constant": self.stability_constant,
            "linear_stability_constant": self.linear_stability_constant,
            "amplitude_limit": self.amplitude_limit,
            "iterations": len(self.trace.records),
            "contraction_ratio": self.trace.contraction_ratio(),
            "stages": self.stages,
        }


@dataclass
class SteadySolution:
    state: np.ndarray
    residual: float
    weighted_sup: float
    mass: float
    trace: IterationTrace
    traces: dict
    series: dict = field(default_factory=dict, repr=False)

    def summary(self) -> dict:
        return {
            "residual": self.residual,
            "weighted_sup_norm": self.weighted_sup,
            "mass": self.mass,
            "iterations": len(self.trace.records),
            "contraction_ratio": self.trace.contraction_ratio(),
        }


def _is_conservative(transport: SlabTransport) -> bool:
    config = transport.config
    return config.epsilon == 0.0 and config.lam == 1.0 and config.damping == 1.0


class CoarseSpace:
    """Smooth spatial modes times the mass, normal-momentum and energy profiles.

    These are the slowly relaxing directions of an undamped period map. Once the residual response
    of the map along every mode is assembled, each iterate is first corrected on the space, so
    that the predicted residual is orthogonal to it, and then mapped once.
    """

    def __init__(self, problem: SlabProblem, n_modes: int):
        grid = problem.grid
        n_x = problem.n_space
        centers = (np.arange(n_x) + 0.5) / n_x
        spatial = np.cos(np.pi * np.arange(min(n_modes, n_x))[:, None] * centers[None, :])
        self.spatial = spatial / np.sqrt(np.sum(spatial**2, axis=1, keepdims=True) * problem.dx)
        sqrt_mu = sqrt_maxwellian(grid.nodes)
        raw = np.stack([sqrt_mu, grid.nodes[:, 0] * sqrt_mu, grid.speed**2 * sqrt_mu])
        root_w = np.sqrt(grid.quad_weight)
        q, _ = np.linalg.qr((raw * root_w).T)
        self.velocity = q.T / root_w
        self._dx = problem.dx
        self._quad = grid.quad_weight
        self.responses = None
        self.matrix = None

    @property
    def shape(self) -> tuple[int, int]:
        return (self.spatial.shape[0], self.velocity.shape[0])

    @property
    def size(self) -> int:
        return self.shape[0] * self.shape[1]

    @property
    def assembled(self) -> bool:
        return self.matrix is not None

    def vector(self, c: np.ndarray) -> np.ndarray:
        return self.spatial.T @ np.reshape(c, self.shape) @ self.velocity

    def project(self, r: np.ndarray) -> np.ndarray:
        """Coefficients of r against the orthonormal modes, flattened."""
        return (self._dx * (self.spatial @ (r * self._quad) @ self.velocity.T)).ravel()

    def assemble(self, residual: Callable[[np.ndarray], np.ndarray], x: np.ndarray, r: np.ndarray) -> None:
        """Finite-difference response of the residual map along every mode, taken at x."""
        responses = np.empty((self.size,) + r.shape)
        for a in range(self.size):
            unit = np.zeros(self.size)
            unit[a] = 1.0
            responses[a] = (residual(x + COARSE_STEP * self.vector(unit)) - r) / COARSE_STEP
        self.responses = responses
        self.matrix = np.stack([self.project(column) for column in responses], axis=1)

    def correct(self, x: np.ndarray, r: np.ndarray) -> np.ndarray:
        """x + V c followed by the predicted map step, with V^T R(x + V c) = 0 to first order."""
        c = np.linalg.lstsq(self.matrix, -self.project(r), rcond=None)[0]
        predicted = r + np.tensordot(c, self.responses, axes=1)
        return x + self.vector(c) + predicted


def _amplitude_limit(stability_constant: Optional[float], delta1: float) -> Optional[float]:
    if not stability_constant or not delta1 > 0:
        return None
    return AMPLITUDE_FACTOR * stability_constant * delta1


def _picard(
    problem: SlabProblem,
    solver: SolverConfig,
    transport: SlabTransport,
    f0: np.ndarray,
    source,
    label: str,
    amplitude_limit: Optional[float] = None,
) -> tuple[np.ndarray, IterationTrace]:
    anchor = _is_conservative(transport)
    trace = IterationTrace(label)
    coarse = None
    if solver.coarse_modes > 0 and transport.config.damping == 1.0:
        coarse = CoarseSpace(problem, solver.coarse_modes)

    def period_map(f: np.ndarray):
        result = transport.advance(f, solver.period_steps, 0, source)
        if anchor:
            new, projected = anchor_mass(result.state, problem)
            return new, projected, result
        return result.state, 0.0, result

    def residual(f: np.ndarray) -> np.ndarray:
        trace.coarse_maps += 1
        return period_map(f)[0] - f

    f = np.asarray(f0, dtype=float)
    for iterate in range(1, solver.max_picard + 1):
        start = time.time()
        new, projected, result = period_map(f)
        if anchor:
            scale = problem.l1_mass_scale(new)
            if iterate > 1 and scale > 0 and abs(projected) > PROJECTED_MASS_LIMIT * scale:
                raise MassDriftError(
                    f"[{label}] projected mass {projected:.3e} is {abs(projected) / scale:.2e} of the mass scale; "
                    f"the boundary or collision flux is not conservative"
                )
            logging.debug(f"[{label}] projected mass {projected:.3e}")
        norm = problem.sup(new)
        diff = problem.sup(new - f)
        boundary_sup = max(problem.sup(result.traces.array(wall)) for wall in WALLS)
        trace.append(IterateRecord(norm, boundary_sup, diff, time.time() - start))
        if amplitude_limit is not None and norm > amplitude_limit:
            raise AmplitudeGuardError(
                f"[{label}] iterate {iterate} has |w f| = {norm:.3e} above the amplitude limit {amplitude_limit:.3e}",
                trace,
            )
        if diff <= solver.picard_tol:
            logging.info(f"[{label}] converged after {iterate} period maps, last difference {diff:.3e}")
            return new, trace
        if coarse is None or iterate < COARSE_AFTER:
            f = new
            continue
        if not coarse.assembled:
            with TimerContextManager(f"[{label}] coarse space of {coarse.size} modes", for_debug=True):
                coarse.assemble(residual, f, new - f)
        f = coarse.correct(f, new - f)
        if anchor:
            f, _ = anchor_mass(f, problem)
    raise ConvergenceError(
        f"[{label}] no convergence within {solver.max_picard} period maps, last difference {diff:.3e}", trace
    )


def _source_norm(problem: SlabProblem, solver: SolverConfig, source, boundary: Optional[BoundaryCondition]) -> float:
    """sup_t |w r| on the incoming boundary plus sup_t |w g / nu|."""
    r_norm, g_norm = 0.0, 0.0
    zeros = problem.zeros()
    nu = np.asarray(problem.collision.nu)
    for n in range(solver.period_steps):
        if boundary is not None and boundary.source is not None:
            for wall in WALLS:
                r = boundary.source(wall, n)
                if r is not None:
                    r_norm = max(r_norm, problem.sup(np.where(problem.walls.incoming(wall), r, 0.0)))
        if source is not None:
            g = source(n, zeros)
            if g is not None:
                g_norm = max(g_norm, problem.sup(g / nu))
    return r_norm + g_norm


def _record_period(
    problem: SlabProblem,
    solver: SolverConfig,
    transport: SlabTransport,
    f: np.ndarray,
    source,
    trace: IterationTrace,
    check_mass: bool,
    label: str,
) -> PeriodicSolution:
    result = transport.advance(f, solver.period_steps, 0, source, problem.spec, solver.snapshot_every)
    slices = result.snapshots
    if solver.period_steps % solver.snapshot_every:
        slices.append(result.state)
    values = np.array(slices)
    residual = problem.sup(values[-1] - values[0])
    masses = np.array([slab_mass(s, problem.grid, problem.dx) for s in values])
    if check_mass:
        for k, (s, m) in enumerate(zip(values, masses)):
            scale = problem.l1_mass_scale(s)
            if abs(m) > MASS_TOLERANCE * max(scale, 1e-300) and abs(m) > 1e-14:
                raise MassDriftError(f"[{label}] slice {k} carries mass {m:.3e} against scale {scale:.3e}")
    return PeriodicSolution(
        history=DistributionField(values, problem.grid, problem.dx),
        periodicity_residual=residual,
        weighted_sup=problem.sup(values),
        slice_mass=masses,
        trace=trace,
        traces=result.traces,
        series=result.series,
    )


def solve_damped_linear(
    problem: SlabProblem,
    solver: SolverConfig,
    g=None,
    r=None,
    j: float = 4,
    epsilon: float = 0.1,
    lam: float = 0.0,
    f0: Optional[np.ndarray] = None,
) -> PeriodicSolution:
    """Periodic solution with the boundary damped by 1 - 1/j; lam = 0 drops K."""
    if not j >= 2:
        raise ConfigurationError(f"the damped problem needs j >= 2, got {j}")
    if not epsilon > 0:
        raise ConfigurationError(f"the damped problem needs epsilon > 0, got {epsilon}")
    return _solve_stage(problem, solver, g, r, epsilon, lam, j, f0)


def _solve_stage(problem, solver, g, r, epsilon, lam, j, f0=None, label=None) -> PeriodicSolution:
    label = label or f"eps={epsilon:g} lam={lam:g} j={j:g}"
    boundary = BoundaryCondition(problem.walls, source=r)
    transport = problem.transport(solver, epsilon=epsilon, lam=lam, j=None if j == np.inf else j, boundary=boundary)
    f0 = problem.zeros() if f0 is None else f0
    with TimerContextManager(f"periodic stage {label}", for_debug=True):
        f, trace = _picard(problem, solver, transport, f0, g, label)
    solution = _record_period(problem, solver, transport, f, g, trace, _is_conservative(transport), label)
    source_norm = _source_norm(problem, solver, g, boundary)
    solution.stability_constant = solution.weighted_sup / source_norm if source_norm > 0 else None
    ratio = trace.contraction_ratio()
    stage = {"epsilon": epsilon, "lambda": lam, "j": None if j == np.inf else j, "C": solution.stability_constant}
    stage["iterations"] = len(trace.records)
    stage["contraction_ratio"] = ratio
    if j != np.inf:
        stage["continuum_factor"] = damped_contraction_factor(j)
    solution.stages = [stage]
    return solution


def solve_linear_periodic(problem: SlabProblem, solver: SolverConfig, g=None, r=None) -> PeriodicSolution:
    """Periodic solution of d_t f + v.grad f + L f = g with the full diffuse boundary plus r."""
    if solver.strategy == "direct":
        return _solve_stage(problem, solver, g, r, 0.0, 1.0, np.inf, label="direct")

    eps0 = solver.epsilon_schedule[0]
    stages = []
    f = None
    solution = None
    plan = [(eps0, 0.0, j) for j in solver.j_schedule if j != np.inf]
    plan += [(eps0, lam, np.inf) for lam in solver.lambda_schedule]
    plan += [(eps, 1.0, np.inf) for eps in solver.epsilon_schedule[1:]]
    with TimerContextManager(f"nested periodic solve over {len(plan)} stages"):
        for eps, lam, j in plan:
            solution = _solve_stage(problem, solver, g, r, eps, lam, j, f)
            stages.extend(solution.stages)
            f = solution.state
    solution.stages = stages
    if solver.epsilon_schedule[-1] != 0.0:
        logging.warning("the epsilon schedule does not end at 0; the returned solution is penalized")
    return solution


def _nonlinear_source(problem: SlabProblem, reference: Optional[np.ndarray]):
    """g(f) = Gamma(ref, f) + Gamma(f, ref) + Gamma(f, f)."""
    collision = problem.collision
    linearized = None if reference is None else linearize_around(collision, reference)

    def source(n: int, f: np.ndarray) -> np.ndarray:
        g = collision.gamma_bilinear(f, f)
        if linearized is not None:
            g = g - linearized(f)
        return g

    return source


def solve_steady(problem: SlabProblem, solver: SolverConfig) -> SteadySolution:
    """F* = mu + sqrt(mu) f* with the walls at their mean temperatures and the same total mass
    as mu."""
    stationary = problem.stationary()
    model = stationary.wall_model
    if model.delta2 > 0.1:
        logging.warning(f"steady solve with |theta_bar - 1| = {model.delta2} > 0.1 is outside the small-data regime")
    walls = stationary.walls

    def kappa(wall: Wall, n: int) -> np.ndarray:
        return walls.correction_kernel(0.0, wall)

    boundary = BoundaryCondition(walls, source=kappa, correction=True)
    transport = stationary.transport(solver, boundary=boundary)
    source = _nonlinear_source(stationary, None)
    with TimerContextManager("steady solve"):
        f, trace = _picard(stationary, solver, transport, stationary.zeros(), source, "steady")
    result = transport.advance(f, solver.period_steps, 0, source, stationary.spec)
    residual = stationary.sup(result.state - f)
    traces = {wall: result.traces.array(wall)[-1] for wall in WALLS}
    mass = slab_mass(f, problem.grid, problem.dx)
    return SteadySolution(f, residual, stationary.sup(f), mass, trace, traces, result.series)


def _periodic_boundary(
    problem: SlabProblem,
    solver: SolverConfig,
    steady: Optional[SteadySolution],
    extra: Optional[Callable] = None,
    correction: bool = True,
) -> BoundaryCondition:
    """P_gamma f + (mu_theta - mu)/sqrt(mu) flux_f + r, r built from the F* traces."""
    source = BoundarySource(problem.walls, None if steady is None else steady.traces)
    dt = problem.wall_model.period_T / solver.period_steps

    def r(wall: Wall, n: int) -> np.ndarray:
        values = source.on_grid((n % solver.period_steps) * dt, wall)
        if extra is not None:
            values = values + extra(wall, n)
        return values

    return BoundaryCondition(problem.walls, source=r, correction=correction)


def solve_periodic_nonlinear(
    problem: SlabProblem,
    solver: SolverConfig,
    steady: Optional[SteadySolution] = None,
) -> PeriodicSolution:
    """f^per with F^per = F* + sqrt(mu) f^per, measured relative to F*."""
    model = problem.wall_model
    check_small_data("wall.delta1", model.delta1, solver)
    check_small_data("wall.delta2", model.delta2, solver)
    if steady is None:
        steady = solve_steady(problem, solver)
    f_star = steady.state

    if solver.strategy == "nested":
        solution = _outer_iteration(problem, solver, steady)
    else:
        boundary = _periodic_boundary(problem, solver, steady)
        transport = problem.transport(solver, boundary=boundary)
        with TimerContextManager("linear periodic phase"):
            f_lin, trace = _picard(problem, solver, transport, problem.zeros(), None, "periodic linear")
        linear = _record_period(problem, solver, transport, f_lin, None, trace, True, "periodic linear")
        constant = linear.weighted_sup / model.delta1 if model.delta1 > 0 else None
        limit = _amplitude_limit(constant, model.delta1)
        source = _nonlinear_source(problem, f_star)
        with TimerContextManager("nonlinear periodic solve"):
            f, trace = _picard(problem, solver, transport, f_lin, source, "periodic", limit)
        solution = _record_period(problem, solver, transport, f, source, trace, True, "periodic")
        solution.linear_stability_constant, solution.amplitude_limit = constant, limit
    solution.stability_constant = solution.weighted_sup / model.delta1 if model.delta1 > 0 else None
    logging.info(
        f"Periodic solution: |w f_per| = {solution.weighted_sup:.4e}, residual {solution.periodicity_residual:.3e}"
    )
    return solution


def _nearest(snapshots: np.ndarray, n: int, solver: SolverConfig) -> int:
    k = int(round((n % solver.period_steps) / solver.snapshot_every))
    return min(k, len(snapshots) - 1)


def _outer_iteration(problem: SlabProblem, solver: SolverConfig, steady: SteadySolution) -> PeriodicSolution:
    """f_{l+1} solves the linear periodic problem with sources frozen at f_l:
    Gamma(f*, f_l) + Gamma(f_l, f*) + Gamma(f_l, f_l) and boundary P_gamma f + kappa flux_{f_l} + r."""
    f_star = steady.state
    walls = problem.walls
    linearized = linearize_around(problem.collision, f_star)
    history = np.zeros((1,) + problem.shape)
    fluxes = {wall: np.zeros(solver.period_steps) for wall in WALLS}
    trace = IterationTrace("outer")
    constant, limit = None, None
    previous = problem.zeros()
    dt = problem.wall_model.period_T / solver.period_steps

    for outer in range(1, solver.max_picard + 1):
        start = time.time()
        frozen, frozen_flux = history, fluxes

        def g(n: int, f: np.ndarray, frozen=frozen) -> np.ndarray:
            f_l = frozen[_nearest(frozen, n, solver)]
            return problem.collision.gamma_bilinear(f_l, f_l) - linearized(f_l)

        def extra(wall: Wall, n: int, frozen_flux=frozen_flux) -> np.ndarray:
            k = n % solver.period_steps
            return walls.correction_kernel(k * dt, wall) * frozen_flux[wall][k]

        boundary = _periodic_boundary(problem, solver, steady, extra, correction=False)
        transport = problem.transport(solver, boundary=boundary)
        with TimerContextManager(f"outer iterate {outer}", for_debug=True):
            f, _ = _picard(problem, solver, transport, previous, g, f"outer {outer}", limit)
        solution = _record_period(problem, solver, transport, f, g, trace, True, f"outer {outer}")
        norm = solution.weighted_sup
        if outer == 1:
            # the first iterate solves the linear problem
            delta1 = problem.wall_model.delta1
            constant = norm / delta1 if delta1 > 0 else None
            limit = _amplitude_limit(constant, delta1)
        elif limit is not None and norm > limit:
            raise AmplitudeGuardError(
                f"outer iterate {outer} has |w f| = {norm:.3e} above the amplitude limit {limit:.3e}", trace
            )

        diff = problem.sup(solution.slices - history) if history.shape == solution.slices.shape else None
        boundary_sup = max(problem.sup(solution.traces.array(wall)) for wall in WALLS)
        trace.append(IterateRecord(norm, boundary_sup, diff, time.time() - start))
        history = solution.slices
        fluxes = {wall: solution.traces.fluxes(wall) for wall in WALLS}
        previous = f
        if diff is not None and diff <= solver.picard_tol:
            logging.info(f"Outer iteration converged after {outer} iterates")
            solution.trace = trace
            solution.linear_stability_constant, solution.amplitude_limit = constant, limit
            return solution
    raise ConvergenceError(f"outer iteration did not converge within {solver.max_picard} iterates", trace)


@dataclass
class EvolveResult:
    series: dict
    state: np.ndarray
    mass_drift: float

    def summary(self) -> dict:
        sup = self.series["weighted_sup_norm"]
        return {
            "steps": int(len(sup) - 1),
            "initial_weighted_sup": float(sup[0]),
            "final_weighted_sup": float(sup[-1]),
            "mass_drift": self.mass_drift,
        }


def make_bump(problem: SlabProblem, amplitude: float, center: float = 0.5, width: float = 0.15) -> np.ndarray:
    """Spatial Gaussian times a velocity profile with the five invariants projected out of every
    cell, scaled to weighted sup norm `amplitude`."""
    grid = problem.grid
    x = (np.arange(problem.n_space) + 0.5) * problem.dx
    psi = np.exp(-(((x - center * problem.slab_length) / (width * problem.slab_length)) ** 2))
    v1 = grid.nodes[:, 0]
    zeta = (1.0 + v1 + v1 * v1) * sqrt_maxwellian(grid.nodes)
    bump = SpectralProjector(grid).complement(psi[:, None] * zeta[None, :])
    bump, _ = anchor_mass(bump, problem)
    return amplitude * bump / problem.sup(bump)


def _evolve_pieces(problem: SlabProblem, periodic: PeriodicSolution, steady: Optional[SteadySolution]):
    f_star = problem.zeros() if steady is None else steady.state
    references = [linearize_around(problem.collision, f_star + s) for s in periodic.slices]
    return references


def evolve_ivp(
    problem: SlabProblem,
    solver: SolverConfig,
    periodic: PeriodicSolution,
    f0: np.ndarray,
    horizon_periods: Optional[int] = None,
    steady: Optional[SteadySolution] = None,
) -> EvolveResult:
    """March F = F^per + sqrt(mu) f from f0."""
    check_small_data("|w f0|", problem.sup(f0), solver)
    horizon = solver.horizon_periods if horizon_periods is None else horizon_periods
    references = _evolve_pieces(problem, periodic, steady)
    collision = problem.collision

    def g(n: int, f: np.ndarray) -> np.ndarray:
        return collision.gamma_bilinear(f, f) - references[_nearest(references, n, solver)](f)

    boundary = BoundaryCondition(problem.walls, source=None, correction=True)
    transport = problem.transport(solver, boundary=boundary)
    initial_mass = slab_mass(f0, problem.grid, problem.dx)
    scale = max(problem.l1_mass_scale(f0), 1e-300)

    series = None
    f = np.asarray(f0, dtype=float)
    drift = 0.0
    with TimerContextManager(f"evolution over {horizon} periods"):
        for period in range(horizon):
            result = transport.advance(f, solver.period_steps, period * solver.period_steps, g, problem.spec)
            f = result.state
            drift = max(drift, abs(slab_mass(f, problem.grid, problem.dx) - initial_mass))
            if drift > MASS_TOLERANCE * scale and drift > 1e-14:
                raise MassDriftError(f"mass drifted by {drift:.3e} after {period + 1} periods (scale {scale:.3e})")
            if series is None:
                series = {k: list(v) for k, v in result.series.items()}
            else:
                for k, v in result.series.items():
                    series[k].extend(v[1:])
            logging.debug(f"Period {period + 1}: |w f| = {result.series['weighted_sup_norm'][-1]:.4e}")
    return EvolveResult({k: np.array(v) for k, v in series.items()}, f, drift)


def evolve_picard_check(
    problem: SlabProblem,
    solver: SolverConfig,
    periodic: PeriodicSolution,
    f0: np.ndarray,
    steady: Optional[SteadySolution] = None,
    n_steps: Optional[int] = None,
    sweeps: int = 3,
) -> dict:
    """Compares the march with `sweeps` sweeps of the function-space iteration, in which every
    nonlinear and boundary-correction term is evaluated on the previous sweep's trajectory."""
    n_steps = solver.period_steps if n_steps is None else n_steps
    references = _evolve_pieces(problem, periodic, steady)
    collision = problem.collision
    walls = problem.walls
    dt = problem.wall_model.period_T / solver.period_steps

    march = evolve_ivp(problem, solver, periodic, f0, horizon_periods=1, steady=steady)
    march_sup = march.series["weighted_sup_norm"][: n_steps + 1]

    previous = np.broadcast_to(np.asarray(f0, dtype=float), (n_steps + 1,) + problem.shape)
    previous_flux = {wall: np.zeros(n_steps) for wall in WALLS}
    initial_transport = problem.transport(solver, boundary=BoundaryCondition(walls))
    for wall, trace in initial_transport.outgoing_traces(np.asarray(f0)).items():
        previous_flux[wall][:] = walls.outgoing_flux(trace, wall)

    sweep_sup = None
    for sweep in range(sweeps):
        frozen, frozen_flux = previous, previous_flux

        def g(n: int, f: np.ndarray, frozen=frozen) -> np.ndarray:
            f_l = frozen[n]
            return collision.gamma_bilinear(f_l, f_l) - references[_nearest(references, n, solver)](f_l)

        def r(wall: Wall, n: int, frozen_flux=frozen_flux) -> np.ndarray:
            return walls.correction_kernel((n % solver.period_steps) * dt, wall) * frozen_flux[wall][n]

        transport = problem.transport(solver, boundary=BoundaryCondition(walls, source=r))
        states = [np.asarray(f0, dtype=float)]
        result = transport.advance(f0, n_steps, 0, g, problem.spec, on_step=lambda n, f: states.append(f.copy()))
        previous = np.array(states)
        previous_flux = {wall: result.traces.fluxes(wall) for wall in WALLS}
        sweep_sup = result.series["weighted_sup_norm"]

    scale = float(np.max(march_sup))
    deviation = float(np.max(np.abs(sweep_sup - march_sup)))
    agrees = deviation <= 0.05 * scale if scale > 0 else deviation == 0.0
    logging.info(f"Picard sweeps vs march: max deviation {deviation:.3e} against norm scale {scale:.3e}")
    return {"sweeps": sweeps, "steps": n_steps, "max_deviation": deviation, "norm_scale": scale, "agrees": agrees}


@dataclass(frozen=True)
class LemmaCheck:
    hypothesis_holds: bool
    violation_index: Optional[int]
    conclusion_holds: bool
    bound: Optional[float]


def iteration_lemma_check(sequence, k: int, D: float = 0.0, decay: Optional[tuple] = None) -> LemmaCheck:
    """With A_i = max(a_i .. a_{i+k}): checks a_{i+1+k} <= A_i / 8 + D on the whole prefix and, if
    that holds, A_i <= 8^-floor(i/(k+1)) max(A_0 .. A_k) + (8+k)/7 D for every i >= k+1.

    decay = (C_k, eta) swaps D for C_k eta^(i+k+1) in the hypothesis and for
    2 C_k (8+k)/7 eta^(i+k) in the conclusion; it needs eta^(k+1) >= 1/4."""
    a = np.asarray(sequence, dtype=float)
    if a.ndim != 1 or np.any(a < 0):
        raise ConfigurationError("the sequence must be one-dimensional and nonnegative")
    if k < 0 or D < 0:
        raise ConfigurationError(f"k and D must be nonnegative, got k={k}, D={D}")
    if decay is not None:
        c_k, eta = decay
        if not (0.0 <= eta < 1.0 and eta ** (k + 1) >= 0.25):
            raise ConfigurationError(f"decay rate eta = {eta} must satisfy eta^(k+1) >= 1/4 with eta < 1")

    n_windows = len(a) - k
    if n_windows <= 0:
        return LemmaCheck(True, None, True, None)
    A = np.array([a[i : i + k + 1].max() for i in range(n_windows)])

    def forcing(i):
        return D if decay is None else decay[0] * decay[1] ** (i + k + 1)

    def conclusion_forcing(i):
        return (8 + k) / 7 * D if decay is None else 2.0 * decay[0] * (8 + k) / 7 * decay[1] ** (i + k)

    slack = 1e-12
    for i in range(len(a) - k - 1):
        rhs = A[i] / 8.0 + forcing(i)
        if a[i + 1 + k] > rhs * (1.0 + slack):
            logging.debug(f"Iteration-lemma hypothesis fails at i={i}: {a[i + 1 + k]} > {rhs}")
            return LemmaCheck(False, i, False, None)

    head = A[: min(k + 1, n_windows)].max()
    bound = None
    holds = True
    for i in range(k + 1, n_windows):
        rhs = 0.125 ** (i // (k + 1)) * head + conclusion_forcing(i)
        if A[i] > rhs * (1.0 + slack):
            holds = False
        bound = rhs
    return LemmaCheck(True, None, holds, bound)
