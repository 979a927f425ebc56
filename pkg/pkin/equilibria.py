"""
Maxwellians, wall temperature profiles and the diffuse-wall boundary data.

Discrete wall Maxwellians are renormalized so that their incoming |v.n| flux on the grid is
exactly one, and the reference Maxwellian's outgoing flux is counted as exactly one under the
same convention. With that, every boundary source built here carries zero discrete flux.
"""

import logging
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Optional, Union

import numpy as np

from pkin.errors import ConfigurationError, DomainError, UsageError
from pkin.vgrid import VelocityGrid


def _squared_speed(v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    return np.sum(v * v, axis=-1)


def global_maxwellian(v):
    return np.exp(-0.5 * _squared_speed(v)) / (2.0 * np.pi)


def sqrt_maxwellian(v):
    return np.exp(-0.25 * _squared_speed(v)) / np.sqrt(2.0 * np.pi)


def wall_maxwellian(v, theta: float):
    if not theta > 0:
        raise DomainError(f"wall temperature must be positive, got {theta}")
    return np.exp(-0.5 * _squared_speed(v) / theta) / (2.0 * np.pi * theta * theta)


class Wall(Enum):
    LEFT = "left"
    RIGHT = "right"

    @property
    def normal(self) -> np.ndarray:
        """Outward unit normal of the slab wall."""
        return np.array([-1.0, 0.0, 0.0]) if self is Wall.LEFT else np.array([1.0, 0.0, 0.0])


WALLS = (Wall.LEFT, Wall.RIGHT)


def as_wall(wall: Union[Wall, str]) -> Wall:
    if isinstance(wall, Wall):
        return wall
    try:
        return Wall(wall)
    except ValueError:
        raise ConfigurationError(f"unknown wall {wall!r}, expected 'left' or 'right'") from None


# functions of the unit phase in [0, 1), each attaining +1 and -1
SHAPES: dict[str, Callable] = {
    "sin": lambda phase: np.sin(2.0 * np.pi * phase),
    "cos": lambda phase: np.cos(2.0 * np.pi * phase),
    "triangle": lambda phase: (2.0 / np.pi) * np.arcsin(np.sin(2.0 * np.pi * phase)),
}


@dataclass(frozen=True)
class WallModel:
    """theta(t, wall) = theta_bar(wall) + delta1 * shape(t).

    shape is either a name from SHAPES, evaluated on the phase (t mod T) / T, or a callable of
    absolute time that must be T-periodic with values in [-1, 1].
    """

    period_T: float = 1.0
    theta_bar_left: float = 1.0
    theta_bar_right: float = 1.0
    delta1: float = 0.0
    shape: Union[str, Callable] = "sin"

    def __post_init__(self):
        if not self.period_T > 0:
            raise ConfigurationError(f"wall.period_T must be positive, got {self.period_T}")
        if self.delta1 < 0:
            raise ConfigurationError(f"wall.delta1 must be nonnegative, got {self.delta1}")
        for name in ("theta_bar_left", "theta_bar_right"):
            if not getattr(self, name) > 0:
                raise ConfigurationError(f"wall.{name} must be positive, got {getattr(self, name)}")
        if not self.delta1 + self.delta2 < 0.5:
            raise ConfigurationError(
                f"wall amplitudes too large: delta1 + delta2 = {self.delta1 + self.delta2} must be below 1/2"
            )
        if isinstance(self.shape, str):
            if self.shape not in SHAPES:
                raise ConfigurationError(f"unknown wall.shape {self.shape!r}, expected one of {sorted(SHAPES)}")
        else:
            self._check_custom_shape()

    def _check_custom_shape(self):
        t = np.linspace(0.0, self.period_T, 257)
        values = np.array([self.shape(s) for s in t])
        shifted = np.array([self.shape(s + self.period_T) for s in t])
        if np.any(np.abs(values) > 1.0 + 1e-12):
            raise ConfigurationError("wall.shape must take values in [-1, 1]")
        if np.max(np.abs(values - shifted)) > 1e-9:
            raise ConfigurationError(f"wall.shape is not periodic with period {self.period_T}")

    @property
    def delta2(self) -> float:
        return max(abs(self.theta_bar_left - 1.0), abs(self.theta_bar_right - 1.0))

    @property
    def stationary(self) -> bool:
        return self.delta1 == 0.0

    def theta_bar(self, wall: Union[Wall, str]) -> float:
        return self.theta_bar_left if as_wall(wall) is Wall.LEFT else self.theta_bar_right

    def shape_at(self, t: float) -> float:
        if isinstance(self.shape, str):
            phase = np.mod(t, self.period_T) / self.period_T
            return float(SHAPES[self.shape](phase))
        return float(self.shape(t))

    def theta(self, t: float, wall: Union[Wall, str]) -> float:
        theta_bar = self.theta_bar(wall)
        if self.delta1 == 0.0:
            return theta_bar
        return theta_bar + self.delta1 * self.shape_at(t)


def theta_at(model: WallModel, t: float, wall: Union[Wall, str]) -> float:
    return model.theta(t, wall)


def discrete_flux(grid: VelocityGrid, values: np.ndarray, normal: np.ndarray, side: str) -> float:
    """sum over one half of the grid of values * |v.n| * quad_weight."""
    vn = grid.nodes @ normal
    mask = vn > 0 if side == "out" else vn < 0
    return float(np.sum(np.where(mask, values * np.abs(vn), 0.0) * grid.quad_weight))


class DiffuseWall:
    """Grid samples of the diffuse-reflection boundary data of a slab.

    All returned profiles are full-length velocity arrays that vanish off the half-grid they
    live on.
    """

    def __init__(self, grid: VelocityGrid, model: WallModel):
        self._grid = grid
        self._model = model
        self._mu = global_maxwellian(grid.nodes)
        self._sqrt_mu = sqrt_maxwellian(grid.nodes)
        self._vn = {wall: grid.nodes @ wall.normal for wall in WALLS}
        self._incoming = {wall: self._vn[wall] < 0 for wall in WALLS}
        self._outgoing = {wall: self._vn[wall] > 0 for wall in WALLS}
        self._mu_flux = {wall: self._incoming_flux(self._mu, wall) for wall in WALLS}
        self._theta_cache: dict[tuple[Wall, float], np.ndarray] = {}

    @property
    def grid(self) -> VelocityGrid:
        return self._grid

    @property
    def model(self) -> WallModel:
        return self._model

    @property
    def sqrt_mu(self) -> np.ndarray:
        return self._sqrt_mu

    def vn(self, wall: Wall) -> np.ndarray:
        return self._vn[wall]

    def incoming(self, wall: Wall) -> np.ndarray:
        return self._incoming[wall]

    def outgoing(self, wall: Wall) -> np.ndarray:
        return self._outgoing[wall]

    def _incoming_flux(self, values: np.ndarray, wall: Wall) -> float:
        return discrete_flux(self._grid, values, wall.normal, "in")

    def mu_flux(self, wall: Wall) -> float:
        """Discrete incoming flux of the sampled reference Maxwellian."""
        return self._mu_flux[wall]

    def outgoing_flux(self, trace: np.ndarray, wall: Wall) -> float:
        """sum over v.n > 0 of trace * sqrt(mu) * |v.n| * quad_weight."""
        return discrete_flux(self._grid, trace * self._sqrt_mu, wall.normal, "out")

    def emission(self, wall: Wall) -> np.ndarray:
        """mu_hat / sqrt(mu) on the incoming half: the diffuse re-emission profile of P_gamma."""
        return np.where(self._incoming[wall], self._sqrt_mu / self._mu_flux[wall], 0.0)

    def wall_maxwellian_hat(self, theta: float, wall: Wall) -> np.ndarray:
        """mu_theta sampled on the incoming half and rescaled to unit discrete flux."""
        key = (wall, float(theta))
        cached = self._theta_cache.get(key)
        if cached is None:
            sample = np.where(self._incoming[wall], wall_maxwellian(self._grid.nodes, theta), 0.0)
            cached = sample / self._incoming_flux(sample, wall)
            if len(self._theta_cache) > 4096:
                self._theta_cache.clear()
            self._theta_cache[key] = cached
        return cached

    def correction_kernel(self, t: float, wall: Union[Wall, str]) -> np.ndarray:
        """(mu_theta(t) - mu) / sqrt(mu) on the incoming half, both renormalized."""
        wall = as_wall(wall)
        mu_hat = np.where(self._incoming[wall], self._mu / self._mu_flux[wall], 0.0)
        theta = self._model.theta(t, wall)
        if theta == 1.0:
            return np.zeros(self._grid.n_nodes)
        return (self.wall_maxwellian_hat(theta, wall) - mu_hat) / self._sqrt_mu

    def temperature_source(self, t: float, wall: Union[Wall, str], reference_flux: float) -> np.ndarray:
        """(mu_theta(t) - mu_theta_bar) / sqrt(mu) times the reference outgoing flux."""
        wall = as_wall(wall)
        theta = self._model.theta(t, wall)
        theta_bar = self._model.theta_bar(wall)
        if theta == theta_bar:
            return np.zeros(self._grid.n_nodes)
        diff = self.wall_maxwellian_hat(theta, wall) - self.wall_maxwellian_hat(theta_bar, wall)
        return reference_flux * diff / self._sqrt_mu

    def normalization(self, theta: float, wall: Wall) -> float:
        """Constant c with c * mu_theta having unit discrete incoming flux."""
        sample = np.where(self._incoming[wall], wall_maxwellian(self._grid.nodes, theta), 0.0)
        return 1.0 / self._incoming_flux(sample, wall)


class BoundarySource:
    """The source r of the nonlinear boundary condition, for a fixed reference state F*.

    F* enters through the outgoing traces of its perturbation f* (F* = mu + sqrt(mu) f*); its
    outgoing flux per wall is 1 + the flux of f*. A missing trace means F* = mu.
    """

    def __init__(self, walls: DiffuseWall, f_star_traces: Optional[dict] = None):
        self._walls = walls
        self._reference_flux = {}
        for wall in WALLS:
            trace = None if f_star_traces is None else f_star_traces.get(wall)
            extra = 0.0 if trace is None else walls.outgoing_flux(np.asarray(trace), wall)
            self._reference_flux[wall] = 1.0 + extra
        logging.debug(f"Reference outgoing fluxes: {self._reference_flux}")

    @property
    def walls(self) -> DiffuseWall:
        return self._walls

    def reference_flux(self, wall: Union[Wall, str]) -> float:
        return self._reference_flux[as_wall(wall)]

    def on_grid(self, t: float, wall: Union[Wall, str]) -> np.ndarray:
        wall = as_wall(wall)
        return self._walls.temperature_source(t, wall, self._reference_flux[wall])

    def __call__(self, t: float, wall: Union[Wall, str], v) -> float:
        wall = as_wall(wall)
        v = np.asarray(v, dtype=float)
        if not float(v @ wall.normal) < 0:
            raise UsageError(f"r is defined on incoming velocities only, got v.n = {float(v @ wall.normal)}")
        model = self._walls.model
        theta, theta_bar = model.theta(t, wall), model.theta_bar(wall)
        if theta == theta_bar:
            return 0.0
        c, c_bar = self._walls.normalization(theta, wall), self._walls.normalization(theta_bar, wall)
        diff = c * wall_maxwellian(v, theta) - c_bar * wall_maxwellian(v, theta_bar)
        return float(self._reference_flux[wall] * diff / sqrt_maxwellian(v))


def boundary_source_r(walls: DiffuseWall, f_star_trace: Optional[np.ndarray], t: float, wall, v) -> float:
    wall = as_wall(wall)
    traces = None if f_star_trace is None else {wall: f_star_trace}
    return BoundarySource(walls, traces)(t, wall, v)


def boundary_correction_kernel(walls: DiffuseWall, t: float, wall, v) -> float:
    wall = as_wall(wall)
    v = np.asarray(v, dtype=float)
    if not float(v @ wall.normal) < 0:
        raise UsageError(f"the correction kernel needs an incoming velocity, got v.n = {float(v @ wall.normal)}")
    theta = walls.model.theta(t, wall)
    c, c_ref = walls.normalization(theta, wall), 1.0 / walls.mu_flux(wall)
    return float((c * wall_maxwellian(v, theta) - c_ref * global_maxwellian(v)) / sqrt_maxwellian(v))
