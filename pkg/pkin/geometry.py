"""
Bounded domains as level sets xi(x) < 0, backward exit times and diffuse-reflection back-time
cycles. Only trajectory statistics run on curved domains; the kinetic solver itself is slab-only.
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Optional

import numpy as np

from pkin.errors import ConfigurationError, DegenerateCycleError, InfiniteExitError, UsageError
from pkin.util.random import GEOMETRY_SAMPLING, substream


_MARCH_STEPS = 64
_MAX_CHUNKS = 4096
GRAZING_TOLERANCE = 1e-10
_STAGNATION = 1e-14


class DomainShape:
    """Common interface of the domains: xi < 0 inside, xi = 0 on the boundary."""

    scale: float = 1.0

    def xi(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def grad(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def normal(self, x: np.ndarray) -> np.ndarray:
        g = np.asarray(self.grad(x), dtype=float)
        return g / np.linalg.norm(g, axis=-1, keepdims=True)

    def contains(self, x: np.ndarray, tol: float = 1e-9) -> bool:
        return bool(self.xi(np.asarray(x, dtype=float)) <= tol * self.scale)

    def on_boundary(self, x: np.ndarray, tol: float = 1e-9) -> bool:
        return bool(abs(self.xi(np.asarray(x, dtype=float))) <= tol * self.scale)

    def exit(self, x: np.ndarray, v: np.ndarray) -> tuple[float, np.ndarray]:
        raise NotImplementedError


@dataclass(frozen=True)
class SlabShape(DomainShape):
    """0 < x_1 < d, unbounded in x_2 and x_3."""

    d: float = 1.0

    def __post_init__(self):
        if not self.d > 0:
            raise ConfigurationError(f"grid.slab_length must be positive, got {self.d}")

    @property
    def scale(self) -> float:
        return self.d

    def xi(self, x):
        x = np.asarray(x, dtype=float)
        return x[..., 0] * (x[..., 0] - self.d)

    def grad(self, x):
        x = np.asarray(x, dtype=float)
        g = np.zeros_like(x)
        g[..., 0] = 2.0 * x[..., 0] - self.d
        return g

    def exit(self, x, v):
        if v[0] > 0:
            t_b = x[0] / v[0]
            x_b = x - t_b * v
            x_b[0] = 0.0
        elif v[0] < 0:
            t_b = (self.d - x[0]) / -v[0]
            x_b = x - t_b * v
            x_b[0] = self.d
        else:
            raise InfiniteExitError(f"velocity {v} is parallel to the slab walls")
        return float(t_b), x_b


@dataclass(frozen=True)
class LevelSetShape(DomainShape):
    """Domain {xi < 0} with vectorized xi and grad; center must be an interior point from
    which every boundary point is visible, and diameter bounds the domain's extent."""

    xi_fn: Callable = field(repr=False)
    grad_fn: Callable = field(repr=False)
    convex: bool = False
    center: tuple = (0.0, 0.0, 0.0)
    diameter: float = 2.0
    name: str = "level_set"
    n_checks: int = 1000

    def __post_init__(self):
        if not self.diameter > 0:
            raise ConfigurationError(f"level set diameter must be positive, got {self.diameter}")
        if not self.xi(np.asarray(self.center)) < 0:
            raise ConfigurationError(f"level set center {self.center} is not inside the domain")
        self._check_boundary()

    @property
    def scale(self) -> float:
        return self.diameter

    def xi(self, x):
        return self.xi_fn(np.asarray(x, dtype=float))

    def grad(self, x):
        return self.grad_fn(np.asarray(x, dtype=float))

    def exit(self, x, v):
        return _level_set_exit(self, x, v)

    def sample_boundary(self, n: int, rng: np.random.Generator) -> np.ndarray:
        center = np.asarray(self.center, dtype=float)
        points = []
        directions = rng.standard_normal((n, 3))
        directions /= np.linalg.norm(directions, axis=-1, keepdims=True)
        for direction in directions:
            try:
                _, x_b = _level_set_exit(self, center, -direction)
            except InfiniteExitError:
                continue
            points.append(x_b)
        return np.array(points)

    def _check_boundary(self):
        rng = substream(0, GEOMETRY_SAMPLING, self.n_checks)
        points = self.sample_boundary(self.n_checks, rng)
        if points.shape[0] == 0:
            raise ConfigurationError(f"no boundary points found for {self.name}")
        g = self.grad(points)
        g_norm = np.linalg.norm(g, axis=-1)
        if np.any(~np.isfinite(g_norm)) or np.any(g_norm < 1e-12):
            raise ConfigurationError(f"grad xi vanishes on the boundary of {self.name}")
        normals = g / g_norm[:, None]
        assert np.allclose(np.linalg.norm(normals, axis=-1), 1.0)
        if not self.convex:
            return

        tangents = rng.standard_normal(points.shape)
        tangents -= np.sum(tangents * normals, axis=-1, keepdims=True) * normals
        tangents /= np.linalg.norm(tangents, axis=-1, keepdims=True)
        h = 1e-3 * self.diameter
        second = (self.xi(points + h * tangents) - 2.0 * self.xi(points) + self.xi(points - h * tangents)) / h**2
        if np.any(second < -1e-6 * np.abs(second).max(initial=1.0)):
            raise ConfigurationError(f"{self.name} is flagged convex but xi is not convex along the boundary")


def _level_set_exit(shape: LevelSetShape, x: np.ndarray, v: np.ndarray) -> tuple[float, np.ndarray]:
    """March along -v with step diameter/64, bisect, then polish with two Newton steps."""
    speed = float(np.linalg.norm(v))
    step = shape.diameter / _MARCH_STEPS / speed
    offsets = np.arange(1, _MARCH_STEPS + 1)
    lo = 0.0
    for chunk in range(_MAX_CHUNKS):
        taus = step * (chunk * _MARCH_STEPS + offsets)
        values = shape.xi(x[None, :] - taus[:, None] * v[None, :])
        outside = np.nonzero(values > 0)[0]
        if outside.size:
            first = outside[0]
            hi = taus[first]
            lo = taus[first - 1] if first > 0 else lo
            break
        lo = taus[-1]
    else:
        raise InfiniteExitError(f"no boundary crossing found along -v for v = {v}")

    while hi - lo > 1e-12 * max(1.0, hi):
        mid = 0.5 * (lo + hi)
        if shape.xi(x - mid * v) > 0:
            hi = mid
        else:
            lo = mid
    tau = 0.5 * (lo + hi)
    bracket = (lo - 1e-12 * max(1.0, hi), hi + 1e-12 * max(1.0, hi))
    for _ in range(2):
        slope = -float(shape.grad(x - tau * v) @ v)
        if slope == 0.0:
            break
        candidate = tau - float(shape.xi(x - tau * v)) / slope
        if bracket[0] <= candidate <= bracket[1]:
            tau = candidate
    return float(tau), x - tau * v


def backward_exit_time(shape: DomainShape, x, v) -> tuple[float, np.ndarray]:
    """t_b = inf{tau >= 0 : x - v tau leaves the closure} and the exit point x - t_b v."""
    x = np.array(x, dtype=float)
    v = np.array(v, dtype=float)
    if np.linalg.norm(v) < 1e-12:
        raise InfiniteExitError(f"backward exit time is infinite for |v| = {np.linalg.norm(v)}")
    if not shape.contains(x):
        raise UsageError(f"point {x} lies outside the domain")
    return shape.exit(x, v)


def ball(radius: float = 1.0) -> LevelSetShape:
    return LevelSetShape(
        xi_fn=lambda x: np.sum(x * x, axis=-1) - radius**2,
        grad_fn=lambda x: 2.0 * x,
        convex=True,
        diameter=2.0 * radius,
        name="ball",
    )


def ellipsoid(axes=(1.0, 0.75, 0.5)) -> LevelSetShape:
    a = np.asarray(axes, dtype=float)
    return LevelSetShape(
        xi_fn=lambda x: np.sum((x / a) ** 2, axis=-1) - 1.0,
        grad_fn=lambda x: 2.0 * x / a**2,
        convex=True,
        diameter=2.0 * float(a.max()),
        name="ellipsoid",
    )


def slab_level_set(d: float = 1.0) -> LevelSetShape:
    """The slab written as the level set x_1 (x_1 - d) < 0."""
    return LevelSetShape(
        xi_fn=lambda x: x[..., 0] * (x[..., 0] - d),
        grad_fn=lambda x: np.stack([2.0 * x[..., 0] - d, np.zeros_like(x[..., 0]), np.zeros_like(x[..., 0])], axis=-1),
        convex=True,
        center=(0.5 * d, 0.0, 0.0),
        diameter=d,
        name="slab",
    )


def make_shape(domain: str = "slab", slab_length: float = 1.0, levelset: str = "ball") -> DomainShape:
    match domain:
        case "slab":
            return SlabShape(slab_length)
        case "level_set":
            match levelset:
                case "ball":
                    return ball()
                case "ellipsoid":
                    return ellipsoid()
                case _:
                    raise ConfigurationError(f"unknown levelset preset {levelset!r}")
        case _:
            raise ConfigurationError(f"unknown domain {domain!r}, expected 'slab' or 'level_set'")


def _tangent_frame(n: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    helper = np.array([1.0, 0.0, 0.0]) if abs(n[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    t1 = np.cross(n, helper)
    t1 /= np.linalg.norm(t1)
    return t1, np.cross(n, t1)


def sample_reflected_velocity(shape: DomainShape, x_boundary, rng: np.random.Generator, size: Optional[int] = None):
    """Draw from mu(v)|v.n| dv on {v.n > 0}: Rayleigh normal speed, standard normal tangential."""
    n = shape.normal(np.asarray(x_boundary, dtype=float))
    t1, t2 = _tangent_frame(n)
    count = 1 if size is None else size
    normal_speed = np.sqrt(-2.0 * np.log1p(-rng.random(count)))
    # log1p(-U) with U in [0, 1) can give a zero speed; redraw those
    while np.any(normal_speed == 0.0):
        zero = normal_speed == 0.0
        normal_speed[zero] = np.sqrt(-2.0 * np.log1p(-rng.random(int(zero.sum()))))
    tangential = rng.standard_normal((count, 2))
    v = normal_speed[:, None] * n + tangential[:, :1] * t1 + tangential[:, 1:] * t2
    return v[0] if size is None else v


class CycleEnd(Enum):
    REACHED_STOP_TIME = "reached-stop-time"
    MAX_BOUNCES = "max-bounces"
    GRAZING = "grazing"


@dataclass
class BackTimeCycle:
    points: list[tuple[float, np.ndarray, np.ndarray]]
    reason: CycleEnd

    @property
    def n_bounces(self) -> int:
        return len(self.points) - 1

    @property
    def times(self) -> np.ndarray:
        return np.array([p[0] for p in self.points])


def trace_back_time_cycle(
    shape: DomainShape,
    t: float,
    x,
    v,
    stop_time: float,
    max_bounces: int,
    rng: Optional[np.random.Generator] = None,
    fixed_speed: bool = False,
) -> BackTimeCycle:
    """(t_0, x_0, v_0) = (t, x, v); t_{k+1} = t_k - t_b(x_k, v_k), x_{k+1} = x_k - t_b v_k and
    v_{k+1} drawn from the diffuse law at x_{k+1}. The cycle keeps every point with t_k above
    stop_time. fixed_speed replaces the draw by specular reflection (deterministic spacing)."""
    if stop_time > t:
        raise UsageError(f"stop_time {stop_time} must not exceed t {t}")
    if rng is None and not fixed_speed:
        raise UsageError("a random generator is required unless fixed_speed is set")
    x = np.array(x, dtype=float)
    v = np.array(v, dtype=float)
    if shape.on_boundary(x) and abs(float(shape.normal(x) @ v)) < GRAZING_TOLERANCE * np.linalg.norm(v):
        raise DegenerateCycleError(f"starting point ({x}, {v}) is grazing")

    points = [(float(t), x, v)]
    tiny = 0
    while True:
        t_b, x_b = backward_exit_time(shape, x, v)
        tiny = tiny + 1 if t_b < _STAGNATION else 0
        if tiny >= 2:
            raise DegenerateCycleError(f"back-time cycle stagnated at x = {x_b} after {len(points) - 1} bounces")
        t_next = points[-1][0] - t_b
        if t_next < stop_time:
            return BackTimeCycle(points, CycleEnd.REACHED_STOP_TIME)
        n = shape.normal(x_b)
        if abs(float(n @ v)) < GRAZING_TOLERANCE * np.linalg.norm(v):
            logging.debug(f"Grazing hit at {x_b}; terminating the cycle")
            return BackTimeCycle(points, CycleEnd.GRAZING)
        if fixed_speed:
            v_next = v - 2.0 * float(n @ v) * n
        else:
            v_next = sample_reflected_velocity(shape, x_b, rng)
        points.append((t_next, x_b, v_next))
        if len(points) - 1 >= max_bounces:
            return BackTimeCycle(points, CycleEnd.MAX_BOUNCES)
        x, v = x_b, v_next


def cycle_resides(shape: DomainShape, cycle: BackTimeCycle, n_interior: int = 100) -> bool:
    """Every segment's interior points x_k - s v_k, s in (0, t_b), lie in the closed domain."""
    tol = 1e-9 * shape.scale
    for (t_k, x_k, v_k), (t_next, _, _) in zip(cycle.points, cycle.points[1:]):
        s = (t_k - t_next) * (np.arange(1, n_interior + 1) / (n_interior + 1))
        if np.any(shape.xi(x_k[None, :] - s[:, None] * v_k[None, :]) > tol):
            return False
    return True


def _default_start(shape: DomainShape) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(shape, SlabShape):
        return np.array([0.5 * shape.d, 0.0, 0.0]), np.array([1.0, 0.0, 0.0])
    return np.asarray(shape.center, dtype=float), np.array([1.0, 0.0, 0.0])


def estimate_escape_probability(
    shape: DomainShape,
    k_bounces: int,
    horizon_nT: float,
    n_samples: int,
    rng: np.random.Generator,
    start: Optional[tuple] = None,
) -> tuple[float, float]:
    """Fraction of diffuse cycles from a fixed start (t = 0, x_0, v_0) whose k-th point still
    has t_k > -horizon, with its binomial standard error."""
    if n_samples < 1000:
        raise ConfigurationError(f"escape estimates need at least 1000 samples, got {n_samples}")
    if k_bounces < 1:
        raise ConfigurationError(f"k_bounces must be at least 1, got {k_bounces}")
    x0, v0 = _default_start(shape) if start is None else (np.asarray(start[0]), np.asarray(start[1]))

    hits = 0
    for _ in range(n_samples):
        cycle = trace_back_time_cycle(shape, 0.0, x0, v0, -horizon_nT, k_bounces, rng)
        if cycle.n_bounces >= k_bounces:
            hits += 1
    p = hits / n_samples
    return p, float(np.sqrt(p * (1.0 - p) / n_samples))


def escape_curve(
    shape: DomainShape,
    ks,
    horizon_nT: float,
    n_samples: int = 2000,
    seed: int = 0,
) -> list[dict]:
    curve = []
    for k in ks:
        p, err = estimate_escape_probability(shape, k, horizon_nT, n_samples, substream(seed, GEOMETRY_SAMPLING, k))
        logging.info(f"Escape probability for k={k} at horizon {horizon_nT}: {p:.4f} +- {err:.4f}")
        curve.append({"k": int(k), "estimate": p, "stderr": err})
    return curve


def near_grazing_indicator(shape: DomainShape, x, v, eps_prime: float) -> bool:
    """|v.n| < eps' or |v| > 1/eps' or |v| < eps'."""
    if not 0.0 < eps_prime < 1.0:
        raise ConfigurationError(f"eps_prime must lie in (0, 1), got {eps_prime}")
    v = np.asarray(v, dtype=float)
    speed = float(np.linalg.norm(v))
    vn = abs(float(shape.normal(np.asarray(x, dtype=float)) @ v))
    return vn < eps_prime or speed > 1.0 / eps_prime or speed < eps_prime
