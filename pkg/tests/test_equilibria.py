import numpy as np
import pytest

from pkin.equilibria import (
    WALLS,
    BoundarySource,
    DiffuseWall,
    Wall,
    WallModel,
    boundary_correction_kernel,
    boundary_source_r,
    discrete_flux,
    global_maxwellian,
    sqrt_maxwellian,
    theta_at,
    wall_maxwellian,
)
from pkin.errors import ConfigurationError, DomainError, UsageError
from pkin.vgrid import WeightSpec, build_velocity_grid, weighted_sup


INCOMING_LEFT = np.array([0.7, -0.2, 0.4])


def test_maxwellians_at_zero():
    assert global_maxwellian(np.zeros(3)) == pytest.approx(1.0 / (2.0 * np.pi))
    assert wall_maxwellian(np.zeros(3), 1.0) == pytest.approx(1.0 / (2.0 * np.pi))
    v = np.random.default_rng(0).normal(size=(20, 3))
    assert np.allclose(wall_maxwellian(v, 1.0), global_maxwellian(v))
    assert np.allclose(sqrt_maxwellian(v) ** 2, global_maxwellian(v))


@pytest.mark.parametrize("theta", [0.0, -1.0])
def test_wall_maxwellian_rejects_temperature(theta):
    with pytest.raises(DomainError):
        wall_maxwellian(np.zeros(3), theta)


def test_total_mass_on_fine_grid():
    grid = build_velocity_grid(8.0, 32)
    assert grid.integrate(global_maxwellian(grid.nodes)) == pytest.approx(np.sqrt(2.0 * np.pi), rel=1e-6)


@pytest.mark.parametrize("theta", [0.8, 1.0, 1.25])
def test_normalized_wall_flux(theta):
    grid = build_velocity_grid(4.0, 8)
    walls = DiffuseWall(grid, WallModel())
    for wall in WALLS:
        profile = walls.wall_maxwellian_hat(theta, wall)
        assert discrete_flux(grid, profile, wall.normal, "in") == pytest.approx(1.0, abs=1e-12)
        assert np.all(profile[walls.outgoing(wall)] == 0.0)


@pytest.mark.parametrize("theta", [0.8, 1.25])
def test_continuum_wall_flux_on_fine_grid(theta):
    grid = build_velocity_grid(8.0, 32)
    flux = discrete_flux(grid, wall_maxwellian(grid.nodes, theta), Wall.LEFT.normal, "in")
    assert flux == pytest.approx(1.0, rel=2e-2)


def test_theta_at():
    stationary = WallModel(theta_bar_left=1.1, theta_bar_right=0.9)
    for t in (0.0, 0.3, 7.25):
        assert theta_at(stationary, t, "left") == 1.1
        assert theta_at(stationary, t, Wall.RIGHT) == 0.9

    model = WallModel(period_T=2.0, theta_bar_left=1.02, delta1=0.05)
    assert theta_at(model, 0.0, "left") == pytest.approx(1.02)
    assert theta_at(model, 0.5, "left") == pytest.approx(1.07)
    for t in np.random.default_rng(0).uniform(0.0, 10.0, 100):
        assert theta_at(model, t, "left") == pytest.approx(theta_at(model, t + 2.0, "left"), abs=1e-12)
    with pytest.raises(ConfigurationError):
        theta_at(model, 0.0, "top")


@pytest.mark.parametrize(
    "kwargs",
    [
        {"period_T": 0.0},
        {"delta1": -0.1},
        {"theta_bar_left": 0.0},
        {"delta1": 0.3, "theta_bar_left": 1.25},
        {"shape": "square"},
        {"shape": lambda t: 2.0 * np.sin(2.0 * np.pi * t)},
        {"shape": lambda t: np.sin(3.0 * t)},
    ],
)
def test_wall_model_validation(kwargs):
    with pytest.raises(ConfigurationError):
        WallModel(**kwargs)


def test_custom_shape():
    model = WallModel(delta1=0.1, shape=lambda t: np.cos(2.0 * np.pi * t))
    assert model.theta(0.0, "left") == pytest.approx(1.1)


def test_boundary_source_vanishes_without_oscillation():
    grid = build_velocity_grid(4.0, 6)
    walls = DiffuseWall(grid, WallModel(theta_bar_left=1.03))
    source = BoundarySource(walls)
    for wall in WALLS:
        assert np.all(source.on_grid(0.37, wall) == 0.0)
    assert boundary_source_r(walls, None, 0.2, "left", INCOMING_LEFT) == 0.0


@pytest.mark.parametrize("t", [0.0, 0.125, 0.3, 0.75])
def test_boundary_source_has_zero_flux(t):
    grid = build_velocity_grid(4.0, 6)
    walls = DiffuseWall(grid, WallModel(theta_bar_left=1.02, theta_bar_right=0.98, delta1=0.03))
    f_star_trace = 0.01 * sqrt_maxwellian(grid.nodes)
    source = BoundarySource(walls, {wall: f_star_trace for wall in WALLS})
    for wall in WALLS:
        r = source.on_grid(t, wall)
        scale = np.max(np.abs(r))
        flux = discrete_flux(grid, r * walls.sqrt_mu, wall.normal, "in")
        assert flux == pytest.approx(0.0, abs=1e-12 * max(scale, 1))
        assert source.reference_flux(wall) > 1.0


def test_boundary_source_with_reference_maxwellian():
    grid = build_velocity_grid(4.0, 6)
    walls = DiffuseWall(grid, WallModel(delta1=0.04))
    source = BoundarySource(walls)
    for t in (0.1, 0.6):
        for wall in WALLS:
            assert np.allclose(source.on_grid(t, wall), walls.correction_kernel(t, wall), atol=1e-14)


def test_boundary_source_is_periodic():
    grid = build_velocity_grid(4.0, 6)
    walls = DiffuseWall(grid, WallModel(period_T=1.0, delta1=0.04, shape="cos"))
    source = BoundarySource(walls)
    assert np.array_equal(source.on_grid(0.0, "right"), source.on_grid(1.0, "right"))
    assert np.array_equal(walls.correction_kernel(0.0, "left"), walls.correction_kernel(2.0, "left"))


def test_boundary_source_rejects_outgoing_velocity():
    grid = build_velocity_grid(4.0, 6)
    walls = DiffuseWall(grid, WallModel(delta1=0.04))
    with pytest.raises(UsageError):
        boundary_source_r(walls, None, 0.25, "left", -INCOMING_LEFT)
    with pytest.raises(UsageError):
        boundary_correction_kernel(walls, 0.25, "left", -INCOMING_LEFT)


def test_correction_kernel():
    grid = build_velocity_grid(4.0, 8)
    assert np.all(DiffuseWall(grid, WallModel()).correction_kernel(0.3, "left") == 0.0)

    hot = DiffuseWall(grid, WallModel(theta_bar_left=1.25))
    assert boundary_correction_kernel(hot, 0.0, "left", np.array([0.05, 0.0, 0.0])) < 0.0

    spec = WeightSpec(0.0, 5.0, 1.0)
    big = DiffuseWall(grid, WallModel(theta_bar_left=1.04, delta1=0.04))
    small = DiffuseWall(grid, WallModel(theta_bar_left=1.02, delta1=0.02))
    ratio = weighted_sup(big.correction_kernel(0.25, "left"), grid, spec) / weighted_sup(
        small.correction_kernel(0.25, "left"), grid, spec
    )
    assert ratio == pytest.approx(2.0, rel=0.25)
