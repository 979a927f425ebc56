"""
Characteristic integrator for (d_t + v_1 d_x + eps + nu) f = lam K f + g on the slab 0 < x < d with
diffuse reflection at both walls.

Each velocity node moves its cell averages by s = |v_1| dt / dx cells per step through an exact
conservative remap of the piecewise constant profile; particles entering through a wall during
the step come from ghost cells holding the incoming boundary value, attenuated only for the part
of the step they spent inside. Negative velocities are handled by mirroring the x axis.

In "interpolation" mode dt is bounded so that no node moves more than half a cell; the foot point
is then interpolated between neighbouring cell values, the incoming wall value included, and
everything is attenuated over the whole step, inflow as well.

Two phases per step: the outgoing wall traces are reduced first (free streaming over the step),
then every node is updated with the diffuse boundary built from them. Right-hand sides are frozen
at the step start, so one step, and hence the period map, is affine in (state, sources).
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from pkin.collision import CollisionOperator
from pkin.equilibria import WALLS, DiffuseWall, Wall, as_wall, global_maxwellian, sqrt_maxwellian
from pkin.errors import ConfigurationError, NumericalBlowupError
from pkin.vgrid import VelocityGrid, WeightSpec, boundary_norm, weighted_sup


TRANSPORT_MODES = ("lookback", "interpolation")

Source = Callable[[int, np.ndarray], Optional[np.ndarray]]
BoundarySourceFn = Callable[[Wall, int], Optional[np.ndarray]]


def damping_factor(j_damping: Optional[float]) -> float:
    """1 - 1/j, with j = None or inf meaning no damping."""
    if j_damping is None or j_damping == np.inf:
        return 1.0
    if j_damping < 1:
        raise ConfigurationError(f"j_damping must be at least 1, got {j_damping}")
    return 1.0 - 1.0 / j_damping


def phi(a: np.ndarray, dt: float) -> np.ndarray:
    """int_0^dt e^{-a s} ds, equal to dt in the limit a -> 0."""
    a = np.asarray(a, dtype=float)
    out = np.full(a.shape, dt)
    nonzero = np.abs(a) * dt > 1e-300
    out[nonzero] = -np.expm1(-a[nonzero] * dt) / a[nonzero]
    return out


@dataclass(frozen=True)
class TransportConfig:
    dt: float
    n_space_cells: int = 64
    slab_length: float = 1.0
    epsilon: float = 0.0
    lam: float = 1.0
    j_damping: Optional[float] = None
    mode: str = "lookback"
    period_steps: Optional[int] = None
    collisionless: bool = False
    order: int = 1

    def __post_init__(self):
        if not self.dt > 0:
            raise ConfigurationError(f"dt must be positive, got {self.dt}")
        if self.n_space_cells < 8:
            raise ConfigurationError(f"grid.n_space must be at least 8, got {self.n_space_cells}")
        if not self.slab_length > 0:
            raise ConfigurationError(f"grid.slab_length must be positive, got {self.slab_length}")
        if self.epsilon < 0:
            raise ConfigurationError(f"epsilon must be nonnegative, got {self.epsilon}")
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigurationError(f"lambda must lie in [0, 1], got {self.lam}")
        damping_factor(self.j_damping)
        if self.mode not in TRANSPORT_MODES:
            raise ConfigurationError(f"unknown solver.transport_mode {self.mode!r}, expected one of {TRANSPORT_MODES}")
        if self.order != 1:
            raise ConfigurationError(f"only linear spatial interpolation is supported, got order {self.order}")
        if self.period_steps is not None and self.period_steps < 1:
            raise ConfigurationError(f"solver.period_steps must be positive, got {self.period_steps}")

    @property
    def dx(self) -> float:
        return self.slab_length / self.n_space_cells

    @property
    def damping(self) -> float:
        return damping_factor(self.j_damping)

    @property
    def period(self) -> float:
        return self.dt * (self.period_steps or 1)

    def time(self, n: int) -> float:
        """Time of step index n; wrapped into [0, T) when the period is known."""
        if self.period_steps:
            return (n % self.period_steps) * self.dt
        return n * self.dt

    def check_cfl(self, grid: VelocityGrid) -> None:
        if self.mode == "interpolation" and self.dt > 0.5 * self.dx / grid.v_max:
            raise ConfigurationError(
                f"dt = {self.dt} exceeds the interpolation bound 0.5 dx / v_max = {0.5 * self.dx / grid.v_max:.6g}"
            )


def apply_diffuse_boundary(
    walls: DiffuseWall,
    wall,
    outgoing: np.ndarray,
    t: float,
    j_damping: Optional[float] = None,
    r: Optional[np.ndarray] = None,
    correction: bool = False,
) -> np.ndarray:
    """Incoming values at a wall from its outgoing trace:
    (1 - 1/j) mu_hat / sqrt(mu) * flux (+ (mu_theta - mu)/sqrt(mu) * flux) (+ r)."""
    wall = as_wall(wall)
    flux = walls.outgoing_flux(outgoing, wall)
    incoming = damping_factor(j_damping) * flux * walls.emission(wall)
    if correction:
        incoming = incoming + flux * walls.correction_kernel(t, wall)
    if r is not None:
        incoming = incoming + np.where(walls.incoming(wall), r, 0.0)
    return incoming


@dataclass
class BoundaryCondition:
    """Diffuse boundary data of a march: walls, an optional source r(wall, step) and whether
    the temperature correction kernel multiplies the outgoing flux."""

    walls: DiffuseWall
    source: Optional[BoundarySourceFn] = None
    correction: bool = False

    def incoming(self, wall: Wall, outgoing: np.ndarray, t: float, n: int, j_damping) -> tuple[np.ndarray, float]:
        r = None if self.source is None else self.source(wall, n)
        values = apply_diffuse_boundary(self.walls, wall, outgoing, t, j_damping, r, self.correction)
        return values, self.walls.outgoing_flux(outgoing, wall)


@dataclass
class WallTrace:
    """Outgoing traces per wall and step, with the diffuse flux they carry."""

    values: dict = field(default_factory=lambda: {wall: [] for wall in WALLS})
    flux: dict = field(default_factory=lambda: {wall: [] for wall in WALLS})

    def append(self, wall: Wall, values: np.ndarray, flux: float):
        self.values[wall].append(values)
        self.flux[wall].append(flux)

    def array(self, wall) -> np.ndarray:
        return np.array(self.values[as_wall(wall)])

    def fluxes(self, wall) -> np.ndarray:
        return np.array(self.flux[as_wall(wall)])

    def consistent(self, walls: DiffuseWall, tol: float = 1e-13) -> bool:
        for wall in WALLS:
            for values, flux in zip(self.values[wall], self.flux[wall]):
                if abs(walls.outgoing_flux(values, wall) - flux) > tol * max(1.0, abs(flux)):
                    return False
        return True


def slab_mass(f: np.ndarray, grid: VelocityGrid, dx: float) -> float:
    """sum over cells and nodes of f sqrt(mu) quad dx."""
    return float(np.sum(f @ (sqrt_maxwellian(grid.nodes) * grid.quad_weight)) * dx)


def cell_masses(f: np.ndarray, grid: VelocityGrid) -> np.ndarray:
    return f @ (sqrt_maxwellian(grid.nodes) * grid.quad_weight)


class _Direction:
    """Remap tables for the nodes moving one way, in coordinates where they move to +x."""

    def __init__(self, nodes: np.ndarray, shifts: np.ndarray, speed: np.ndarray, nu: np.ndarray, config):
        self.nodes = nodes
        n_x, dt, dx = config.n_space_cells, config.dt, config.dx
        s = shifts[nodes]
        self.whole = np.floor(s).astype(np.int64)
        self.frac = s - self.whole
        self.n_ghost = int(self.whole.max(initial=0)) + 1
        self.attenuation = np.exp(-nu[nodes] * dt)
        if config.mode == "interpolation":
            self.ghost_attenuation = np.broadcast_to(self.attenuation[None, :], (self.n_ghost, len(nodes)))
        else:
            m = np.arange(self.n_ghost)[:, None]
            with np.errstate(divide="ignore"):
                inside = np.maximum(dt - (m + 0.5) * dx / speed[nodes][None, :], 0.0)
            self.ghost_attenuation = np.exp(-nu[nodes][None, :] * inside)
        cells = np.arange(n_x)[:, None]
        self.exit_weight = np.clip(cells + 1 + s[None, :] - n_x, 0.0, 1.0) * dx
        rows = cells + self.n_ghost - self.whole[None, :]
        self.rows = rows
        self.cols = np.broadcast_to(np.arange(len(nodes))[None, :], rows.shape)

    def remap(self, interior: np.ndarray, ghost: np.ndarray) -> np.ndarray:
        # ghost[m] sits m + 1/2 cells outside the inflow wall
        extended = np.concatenate([ghost[::-1], interior], axis=0)
        here = extended[self.rows, self.cols]
        behind = extended[self.rows - 1, self.cols]
        return (1.0 - self.frac) * here + self.frac * behind

    def exits(self, values: np.ndarray) -> np.ndarray:
        return np.sum(values * self.exit_weight, axis=0)


class SlabTransport:
    """Step and period maps of the slab integrator for one grid, configuration and collision
    model; collision=None or config.collisionless gives pure transport with nu = 0."""

    def __init__(
        self,
        grid: VelocityGrid,
        config: TransportConfig,
        collision: Optional[CollisionOperator] = None,
        boundary: Optional[BoundaryCondition] = None,
    ):
        config.check_cfl(grid)
        self._grid = grid
        self._config = config
        self._collision = None if config.collisionless else collision
        self._boundary = boundary
        self._nu = np.zeros(grid.n_nodes) if self._collision is None else np.asarray(self._collision.nu)
        self._sqrt_mu = sqrt_maxwellian(grid.nodes)
        self._mass_weights = self._sqrt_mu * grid.quad_weight
        self._mu_mass = float(np.sum(global_maxwellian(grid.nodes) * grid.quad_weight))

        vx = grid.nodes[:, 0]
        speed = np.abs(vx)
        shifts = speed * config.dt / config.dx
        self._local = speed < config.dx / (10.0 * config.period)
        shifts[self._local] = 0.0
        if shifts.max() >= config.n_space_cells:
            raise ConfigurationError(f"dt = {config.dt} moves the fastest node across the whole slab in one step")

        self._plus = _Direction(np.nonzero((vx > 0) & ~self._local)[0], shifts, speed, self._nu, config)
        self._minus = _Direction(np.nonzero((vx < 0) & ~self._local)[0], shifts, speed, self._nu, config)
        self._local_nodes = np.nonzero(self._local)[0]
        self._speed = speed
        self._phi_nu = phi(self._nu, config.dt)
        self._phi_total = phi(self._nu + config.epsilon, config.dt)
        self._eps_decay = float(np.exp(-config.epsilon * config.dt))
        logging.debug(
            f"Slab transport: {config.n_space_cells} cells, dt={config.dt}, max shift {shifts.max():.3f} cells, "
            f"{len(self._local_nodes)} local nodes"
        )

    @property
    def grid(self) -> VelocityGrid:
        return self._grid

    @property
    def config(self) -> TransportConfig:
        return self._config

    @property
    def boundary(self) -> Optional[BoundaryCondition]:
        return self._boundary

    @property
    def nu(self) -> np.ndarray:
        return self._nu

    def outgoing_traces(self, f: np.ndarray) -> dict:
        """Outgoing trace per wall: the free-streaming exit mass over the step / (|v_1| dt)."""
        dt = self._config.dt
        traces = {}
        for wall, direction, oriented in ((Wall.RIGHT, self._plus, f), (Wall.LEFT, self._minus, f[::-1])):
            trace = np.zeros(self._grid.n_nodes)
            if direction.nodes.size:
                exits = direction.exits(oriented[:, direction.nodes])
                trace[direction.nodes] = exits / (self._speed[direction.nodes] * dt)
            traces[wall] = trace
        return traces

    def _incoming(self, traces: dict, n: int) -> tuple[dict, dict]:
        if self._boundary is None:
            zero = np.zeros(self._grid.n_nodes)
            return {wall: zero for wall in WALLS}, {wall: 0.0 for wall in WALLS}
        t = self._config.time(n)
        incoming, fluxes = {}, {}
        for wall in WALLS:
            incoming[wall], fluxes[wall] = self._boundary.incoming(wall, traces[wall], t, n, self._config.j_damping)
        return incoming, fluxes

    def _stream(self, f: np.ndarray, incoming: dict, attenuate: bool) -> np.ndarray:
        out = np.empty_like(f)
        for wall, direction, oriented in ((Wall.LEFT, self._plus, f), (Wall.RIGHT, self._minus, f[::-1])):
            nodes = direction.nodes
            if not nodes.size:
                continue
            values = oriented[:, nodes]
            ghost = np.broadcast_to(incoming[wall][nodes][None, :], (direction.n_ghost, nodes.size))
            if attenuate:
                values = values * direction.attenuation[None, :]
                ghost = ghost * direction.ghost_attenuation
            moved = direction.remap(values, ghost)
            if wall is Wall.LEFT:
                out[:, nodes] = moved
            else:
                out[:, nodes] = moved[::-1]
        local = self._local_nodes
        if local.size:
            out[:, local] = f[:, local] * (np.exp(-self._nu[local] * self._config.dt) if attenuate else 1.0)
        return out

    def step(self, f: np.ndarray, n: int, source: Optional[Source] = None) -> tuple[np.ndarray, dict, dict]:
        """One step from step index n; returns (f at n+1, outgoing traces, outgoing fluxes)."""
        config = self._config
        traces = self.outgoing_traces(f)
        incoming, fluxes = self._incoming(traces, n)

        updated = self._stream(f, incoming, attenuate=True)
        if self._collision is not None and config.lam > 0:
            gain = self._phi_nu * (config.lam * self._collision.gain(f))
            if config.lam == 1.0:
                # collisions must not change any cell's mass
                free = self._stream(f, incoming, attenuate=False)
                defect = (updated - free + gain) @ self._mass_weights
                gain = gain - defect[:, None] * (self._sqrt_mu / self._mu_mass)[None, :]
            updated = updated + gain
        updated = self._eps_decay * updated

        g = None if source is None else source(n, f)
        if g is not None:
            updated = updated + self._phi_total * g

        if not np.all(np.isfinite(updated)):
            bad = np.argwhere(~np.isfinite(updated))[0]
            t = (n + 1) * config.dt
            raise NumericalBlowupError(
                f"non-finite value at cell {bad[0]}, velocity node {bad[1]}, t = {t:.6g}", node=tuple(bad), t=t
            )
        return updated, traces, fluxes

    def advance(
        self,
        f: np.ndarray,
        n_steps: int,
        start_step: int = 0,
        source: Optional[Source] = None,
        spec: Optional[WeightSpec] = None,
        snapshot_every: Optional[int] = None,
        on_step: Optional[Callable[[int, np.ndarray], None]] = None,
    ) -> "PeriodResult":
        grid, dx = self._grid, self._config.dx
        f = np.asarray(f, dtype=float)
        recorder = _SeriesRecorder(grid, self._config, spec)
        traces = WallTrace()
        snapshots = [f.copy()] if snapshot_every else []
        state = f
        for k in range(n_steps):
            n = start_step + k
            state, outgoing, fluxes = self.step(state, n, source)
            for wall in WALLS:
                traces.append(wall, outgoing[wall], fluxes[wall])
            if k == 0:
                recorder.record(start_step, f, outgoing)
            recorder.record(n + 1, state, outgoing)
            if snapshot_every and (k + 1) % snapshot_every == 0:
                snapshots.append(state.copy())
            if on_step is not None:
                on_step(n + 1, state)
        if n_steps == 0:
            recorder.record(start_step, state, None)
        return PeriodResult(state=state, traces=traces, series=recorder.finish(), snapshots=snapshots, dx=dx)


class _SeriesRecorder:
    def __init__(self, grid: VelocityGrid, config: TransportConfig, spec: Optional[WeightSpec]):
        self._grid = grid
        self._config = config
        self._spec = spec
        self._rows = []

    def record(self, n: int, f: np.ndarray, outgoing: Optional[dict]):
        grid, dx = self._grid, self._config.dx
        sup = weighted_sup(f, grid, self._spec) if self._spec is not None else float(np.max(np.abs(f), initial=0.0))
        l2 = float(np.sqrt(np.sum((f * f) @ grid.quad_weight) * dx))
        if outgoing is None:
            bnorm = 0.0
        else:
            bnorm = max(boundary_norm(outgoing[wall], grid, wall.normal, "out") for wall in WALLS)
        self._rows.append((n * self._config.dt, sup, l2, bnorm, slab_mass(f, grid, dx)))

    def finish(self) -> dict:
        columns = np.array(self._rows).T if self._rows else np.zeros((5, 0))
        names = ("t", "weighted_sup_norm", "l2_norm", "boundary_norm", "mass_moment")
        return {name: column for name, column in zip(names, columns)}


@dataclass
class PeriodResult:
    state: np.ndarray
    traces: WallTrace
    series: dict
    snapshots: list = field(default_factory=list)
    dx: float = 1.0


def step_linear(
    f: np.ndarray,
    config: TransportConfig,
    grid: VelocityGrid,
    collision: Optional[CollisionOperator],
    boundary: Optional[BoundaryCondition],
    n: int,
    source: Optional[Source] = None,
) -> np.ndarray:
    return SlabTransport(grid, config, collision, boundary).step(f, n, source)[0]


def advance_period(
    f: np.ndarray,
    config: TransportConfig,
    grid: VelocityGrid,
    collision: Optional[CollisionOperator],
    boundary: Optional[BoundaryCondition],
    n_steps: int,
    source: Optional[Source] = None,
    spec: Optional[WeightSpec] = None,
) -> PeriodResult:
    return SlabTransport(grid, config, collision, boundary).advance(f, n_steps, 0, source, spec)
