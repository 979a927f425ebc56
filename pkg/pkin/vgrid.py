"""
Velocity-space discretization: the midpoint lattice of [-v_max, v_max]^3, velocity weights, and
the volume / boundary / weighted sup norms every other module reports.

Nodes are ordered with numpy "ij" indexing flattened in C order, i.e. node (i, j, k) along
(v1, v2, v3) sits at index (i * n + j) * n + k.
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import numpy as np
from scipy import special

from pkin.errors import ConfigurationError, DimensionError


@dataclass(frozen=True)
class VelocityGrid:
    v_max: float
    n_per_axis: int
    nodes: np.ndarray = field(repr=False)
    quad_weight: np.ndarray = field(repr=False)

    @property
    def spacing(self) -> float:
        return 2.0 * self.v_max / self.n_per_axis

    @property
    def n_nodes(self) -> int:
        return self.nodes.shape[0]

    @property
    def cell_volume(self) -> float:
        return self.spacing**3

    @property
    def axis(self) -> np.ndarray:
        return lattice_axis(self.v_max, self.n_per_axis)

    @property
    def speed(self) -> np.ndarray:
        return np.linalg.norm(self.nodes, axis=-1)

    @property
    def lattice_index(self) -> np.ndarray:
        """Integer (i, j, k) coordinates of every node."""
        n = self.n_per_axis
        idx = np.indices((n, n, n)).reshape(3, -1).T
        return idx

    def reflection_permutation(self) -> np.ndarray:
        """perm[i] is the node at -v_i."""
        n = self.n_per_axis
        idx = (n - 1) - self.lattice_index
        return (idx[:, 0] * n + idx[:, 1]) * n + idx[:, 2]

    def integrate(self, values: np.ndarray) -> np.ndarray:
        """Quadrature over the last axis."""
        values = np.asarray(values)
        if values.shape[-1] != self.n_nodes:
            raise DimensionError(f"expected {self.n_nodes} velocity nodes, got {values.shape[-1]}")
        return values @ self.quad_weight

    def same_as(self, other: "VelocityGrid") -> bool:
        return self.v_max == other.v_max and self.n_per_axis == other.n_per_axis


def lattice_axis(v_max: float, n_per_axis: int) -> np.ndarray:
    """Cell midpoints of [-v_max, v_max]; exactly odd under v -> -v, with 0 a node for odd n."""
    return (2.0 * v_max / n_per_axis) * (np.arange(n_per_axis) - 0.5 * (n_per_axis - 1))


def build_velocity_grid(v_max: float = 6.0, n_per_axis: int = 16) -> VelocityGrid:
    if not v_max > 0:
        raise ConfigurationError(f"grid.v_max must be positive, got {v_max}")
    if int(n_per_axis) != n_per_axis or n_per_axis < 2:
        raise ConfigurationError(f"grid.n_per_axis must be an integer >= 2, got {n_per_axis}")
    n_per_axis = int(n_per_axis)
    spacing = 2.0 * v_max / n_per_axis
    axis = lattice_axis(v_max, n_per_axis)
    v1, v2, v3 = np.meshgrid(axis, axis, axis, indexing="ij")
    nodes = np.stack([v1.ravel(), v2.ravel(), v3.ravel()], axis=-1)
    quad_weight = np.full(nodes.shape[0], spacing**3)
    nodes.flags.writeable = False
    quad_weight.flags.writeable = False
    return VelocityGrid(v_max=float(v_max), n_per_axis=n_per_axis, nodes=nodes, quad_weight=quad_weight)


def truncation_mass_loss(grid: VelocityGrid) -> float:
    """Fraction of the Gaussian mass of mu lying outside the velocity cube."""
    inside = special.erf(grid.v_max / np.sqrt(2.0)) ** 3
    return float(1.0 - inside)


@dataclass(frozen=True)
class WeightSpec:
    """Velocity weight (1+|v|^2)^(beta/2) e^(q|v|^2).

    With strict=False the admissibility ranges are not enforced; this is only meant for
    evaluating the weight formula itself.
    """

    q: float
    beta: float
    gamma: float
    strict: bool = True

    def __post_init__(self):
        if not self.strict:
            return
        if not 0.0 <= self.q < 0.125:
            raise ConfigurationError(f"model.q must lie in [0, 1/8), got {self.q}")
        beta_min = max(3.0, 3.0 - self.gamma)
        if not self.beta > beta_min:
            raise ConfigurationError(f"model.beta must exceed {beta_min} for gamma={self.gamma}, got {self.beta}")


def _squared_speed(v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    return np.sum(v * v, axis=-1)


def weight(v, spec: WeightSpec):
    s2 = _squared_speed(v)
    return (1.0 + s2) ** (0.5 * spec.beta) * np.exp(spec.q * s2)


def dual_weight(v, spec: WeightSpec):
    """1 / (w(v) sqrt(mu(v)))."""
    s2 = _squared_speed(v)
    sqrt_mu = np.exp(-0.25 * s2) / np.sqrt(2.0 * np.pi)
    return 1.0 / (weight(v, spec) * sqrt_mu)


class Representation(Enum):
    PLAIN = "plain-f"
    WEIGHTED = "weighted-h"


@dataclass
class DistributionField:
    """Values on (time slice, space cell, velocity node)."""

    values: np.ndarray
    grid: VelocityGrid
    cell_width: float
    representation: Representation = Representation.PLAIN

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim == 2:
            self.values = self.values[None]
        if self.values.ndim != 3:
            raise DimensionError(f"field must be (time, space, velocity), got shape {self.values.shape}")
        if self.values.shape[-1] != self.grid.n_nodes:
            raise DimensionError(f"field has {self.values.shape[-1]} velocity nodes, grid has {self.grid.n_nodes}")
        assert np.all(np.isfinite(self.values)), "field values must be finite"

    @property
    def layout(self) -> tuple[int, int, int]:
        return self.values.shape

    @property
    def slab_length(self) -> float:
        return self.cell_width * self.values.shape[1]

    def to_weighted(self, spec: WeightSpec) -> "DistributionField":
        if self.representation is Representation.WEIGHTED:
            return self
        w = weight(self.grid.nodes, spec)
        return DistributionField(self.values * w, self.grid, self.cell_width, Representation.WEIGHTED)

    def to_plain(self, spec: WeightSpec) -> "DistributionField":
        if self.representation is Representation.PLAIN:
            return self
        w = weight(self.grid.nodes, spec)
        return DistributionField(self.values / w, self.grid, self.cell_width, Representation.PLAIN)

    def scaled(self, a: float) -> "DistributionField":
        return DistributionField(a * self.values, self.grid, self.cell_width, self.representation)


def _plain(field: DistributionField, spec: Optional[WeightSpec]) -> np.ndarray:
    if field.representation is Representation.PLAIN:
        return field.values
    if spec is None:
        raise DimensionError("a weight spec is needed to read a weighted field")
    return field.to_plain(spec).values


def weighted_sup_norm(field: DistributionField, spec: WeightSpec) -> float:
    if field.representation is Representation.WEIGHTED:
        return float(np.max(np.abs(field.values)))
    return weighted_sup(field.values, field.grid, spec)


def weighted_sup(values: np.ndarray, grid: VelocityGrid, spec: WeightSpec) -> float:
    """Array version of weighted_sup_norm for any (..., n_v) array."""
    values = np.asarray(values)
    if values.shape[-1] != grid.n_nodes:
        raise DimensionError(f"expected {grid.n_nodes} velocity nodes, got {values.shape[-1]}")
    if values.size == 0:
        return 0.0
    return float(np.max(np.abs(values * weight(grid.nodes, spec))))


def l2_norm_series(
    field: DistributionField,
    nu_power: float = 0.0,
    nu: Optional[np.ndarray] = None,
    spec: Optional[WeightSpec] = None,
) -> np.ndarray:
    """Per-slice sqrt(sum over x, v of nu^p |f|^2 dx dv)."""
    values = _plain(field, spec)
    density = values * values
    if nu_power != 0.0:
        if nu is None:
            raise DimensionError("nu is required for a nonzero nu_power")
        nu = np.asarray(nu)
        if nu.shape != (field.grid.n_nodes,):
            raise DimensionError(f"nu has shape {nu.shape}, grid has {field.grid.n_nodes} nodes")
        density = density * nu**nu_power
    per_slice = np.sum(density @ field.grid.quad_weight, axis=-1) * field.cell_width
    return np.sqrt(per_slice)


def l2_norm(
    field: DistributionField,
    nu_power: float = 0.0,
    nu: Optional[np.ndarray] = None,
    spec: Optional[WeightSpec] = None,
) -> float:
    """Largest per-slice L2 norm over the time slices of the field."""
    return float(np.max(l2_norm_series(field, nu_power, nu, spec)))


def boundary_norm(trace: np.ndarray, grid: VelocityGrid, normal: np.ndarray, side: str = "out") -> float:
    """L2(gamma_+/-) norm of a wall trace with measure |v.n| dv; slab walls have unit area.

    trace holds values on all velocity nodes (only the requested half is read) and may carry
    leading axes, whose largest norm is returned.
    """
    trace = np.asarray(trace, dtype=float)
    if trace.shape[-1] != grid.n_nodes:
        raise DimensionError(f"trace has {trace.shape[-1]} velocity nodes, grid has {grid.n_nodes}")
    vn = grid.nodes @ np.asarray(normal, dtype=float)
    match side:
        case "out":
            mask = vn > 0
        case "in":
            mask = vn < 0
        case _:
            raise ConfigurationError(f"unknown boundary side {side!r}")
    measure = np.where(mask, np.abs(vn), 0.0) * grid.quad_weight
    per_slice = (trace * trace) @ measure
    return float(np.sqrt(np.max(np.atleast_1d(per_slice))))


@dataclass(frozen=True)
class NormReport:
    weighted_sup: float
    l2: float
    l2_nu: Optional[float]
    truncation_loss: float

    def to_dict(self) -> dict:
        return {
            "weighted_sup_norm": self.weighted_sup,
            "l2_norm": self.l2,
            "l2_nu_norm": self.l2_nu,
            "truncation_mass_loss": self.truncation_loss,
        }


def norm_report(field: DistributionField, spec: WeightSpec, nu: Optional[np.ndarray] = None) -> NormReport:
    report = NormReport(
        weighted_sup=weighted_sup_norm(field, spec),
        l2=l2_norm(field, 0.0, spec=spec),
        l2_nu=None if nu is None else l2_norm(field, 1.0, nu=nu, spec=spec),
        truncation_loss=truncation_mass_loss(field.grid),
    )
    logging.debug(f"Norms: {report}")
    return report
