import numpy as np
import pytest

from pkin.equilibria import sqrt_maxwellian
from pkin.errors import ConfigurationError, DimensionError
from pkin.vgrid import (
    DistributionField,
    Representation,
    WeightSpec,
    boundary_norm,
    build_velocity_grid,
    dual_weight,
    l2_norm,
    norm_report,
    truncation_mass_loss,
    weight,
    weighted_sup_norm,
)


def test_default_grid():
    grid = build_velocity_grid(6.0, 16)
    assert grid.n_nodes == 4096
    assert grid.spacing == 0.75
    assert np.all(grid.quad_weight == 0.421875)
    assert np.sum(grid.quad_weight) == pytest.approx(12.0**3)


def test_two_point_grid():
    grid = build_velocity_grid(1.0, 2)
    assert grid.n_nodes == 8
    assert np.all(np.abs(grid.nodes) == 0.5)
    assert np.sum(grid.quad_weight) == 8.0


@pytest.mark.parametrize("v_max, n", [(6.0, 0), (6.0, 1), (0.0, 8), (-1.0, 8), (6.0, 2.5)])
def test_invalid_grid(v_max, n):
    with pytest.raises(ConfigurationError):
        build_velocity_grid(v_max, n)


@pytest.mark.parametrize("v_max, n", [(2.0, 3), (2.0, 4), (4.0, 5), (6.0, 7), (4.0, 6)])
def test_reflection_symmetry(v_max, n):
    grid = build_velocity_grid(v_max, n)
    perm = grid.reflection_permutation()
    assert np.array_equal(grid.nodes[perm], -grid.nodes)
    assert np.array_equal(grid.axis[::-1], -grid.axis)
    if n % 2:
        assert grid.axis[n // 2] == 0.0
        assert np.count_nonzero(np.all(grid.nodes == 0.0, axis=1)) == 1


def test_weight_examples():
    assert weight(np.zeros(3), WeightSpec(0.0625, 5.0, 1.0)) == 1.0
    assert weight(np.array([1.0, 0.0, 0.0]), WeightSpec(0.0, 2.0, 1.0, strict=False)) == pytest.approx(2.0)
    assert weight(np.array([4.0, 0.0, 0.0]), WeightSpec(0.0625, 0.0, 1.0, strict=False)) == pytest.approx(np.e)


def test_weight_is_radially_nondecreasing():
    spec = WeightSpec(0.0625, 5.0, 1.0)
    r = np.linspace(0.0, 8.0, 200)
    values = weight(r[:, None] * np.array([0.0, 0.6, 0.8])[None, :], spec)
    assert np.all(np.diff(values) >= 0.0)
    assert np.all(values >= 1.0)


def test_dual_weight():
    assert dual_weight(np.zeros(3), WeightSpec(0.0, 0.0, 1.0, strict=False)) == pytest.approx(np.sqrt(2.0 * np.pi))
    spec = WeightSpec(0.0625, 3.5, 1.0)
    v = np.random.default_rng(0).normal(size=(50, 3))
    assert np.allclose(dual_weight(v, spec) * weight(v, spec) * sqrt_maxwellian(v), 1.0, rtol=1e-13)
    assert 1.0 / dual_weight(np.array([4.0, 0, 0]), spec) < 1.0 / dual_weight(np.array([2.0, 0, 0]), spec)


@pytest.mark.parametrize(
    "q, beta, gamma",
    [(0.125, 5.0, 1.0), (-0.01, 5.0, 1.0), (0.0625, 3.0, 1.0), (0.0625, 4.0, -1.0)],
)
def test_weight_spec_rejects(q, beta, gamma):
    with pytest.raises(ConfigurationError):
        WeightSpec(q, beta, gamma)


def test_weighted_sup_norm():
    grid = build_velocity_grid(2.0, 3)
    spec = WeightSpec(0.0625, 5.0, 1.0)
    zero = DistributionField(np.zeros((2, 4, grid.n_nodes)), grid, 0.25)
    assert weighted_sup_norm(zero, spec) == 0.0

    inverse = DistributionField(np.tile(1.0 / weight(grid.nodes, spec), (1, 4, 1)), grid, 0.25)
    assert weighted_sup_norm(inverse, spec) == pytest.approx(1.0)

    values = np.zeros((1, 4, grid.n_nodes))
    center = int(np.argmin(grid.speed))
    values[0, 2, center] = -0.3 / weight(grid.nodes[center], spec)
    assert weighted_sup_norm(DistributionField(values, grid, 0.25), spec) == pytest.approx(0.3)


def test_l2_norm_of_constant():
    grid = build_velocity_grid(2.0, 4)
    d, n_x, c = 1.5, 6, 0.7
    field = DistributionField(np.full((1, n_x, grid.n_nodes), c), grid, d / n_x)
    assert l2_norm(field) == pytest.approx(c * np.sqrt(d * 4.0**3))
    assert l2_norm(DistributionField(np.zeros((1, n_x, grid.n_nodes)), grid, d / n_x)) == 0.0


def test_l2_norm_needs_nu():
    grid = build_velocity_grid(2.0, 4)
    field = DistributionField(np.ones((1, 8, grid.n_nodes)), grid, 0.125)
    with pytest.raises(DimensionError):
        l2_norm(field, nu_power=1.0)
    with pytest.raises(DimensionError):
        l2_norm(field, nu_power=1.0, nu=np.ones(3))


def test_boundary_norm_of_sqrt_mu():
    grid = build_velocity_grid(6.0, 48)
    trace = sqrt_maxwellian(grid.nodes)
    assert boundary_norm(trace, grid, np.array([1.0, 0.0, 0.0])) == pytest.approx(1.0, rel=5e-3)
    with pytest.raises(DimensionError):
        boundary_norm(trace[:-1], grid, np.array([1.0, 0.0, 0.0]))


def test_norm_homogeneity_and_representation():
    grid = build_velocity_grid(3.0, 6)
    spec = WeightSpec(0.0625, 5.0, 1.0)
    rng = np.random.default_rng(1)
    field = DistributionField(rng.normal(size=(3, 8, grid.n_nodes)), grid, 0.125)
    for a in (-2.5, 0.1):
        scaled = field.scaled(a)
        assert weighted_sup_norm(scaled, spec) == pytest.approx(abs(a) * weighted_sup_norm(field, spec), rel=1e-12)
        assert l2_norm(scaled) == pytest.approx(abs(a) * l2_norm(field), rel=1e-12)

    weighted = field.to_weighted(spec)
    assert weighted.representation is Representation.WEIGHTED
    back = weighted.to_plain(spec)
    assert np.max(np.abs(back.values - field.values) / np.abs(field.values)) <= 1e-13
    assert weighted_sup_norm(weighted, spec) == pytest.approx(weighted_sup_norm(field, spec), rel=1e-14)


def test_field_layout_errors():
    grid = build_velocity_grid(2.0, 4)
    with pytest.raises(DimensionError):
        DistributionField(np.zeros((2, 3, grid.n_nodes + 1)), grid, 0.1)
    with pytest.raises(DimensionError):
        DistributionField(np.zeros(grid.n_nodes), grid, 0.1)


def test_truncation_loss():
    assert truncation_mass_loss(build_velocity_grid(6.0, 16)) < 1e-7
    assert truncation_mass_loss(build_velocity_grid(1.0, 4)) > 0.5
    grid = build_velocity_grid(3.0, 6)
    report = norm_report(DistributionField(np.ones((1, 8, grid.n_nodes)), grid, 0.125), WeightSpec(0.0, 5.0, 1.0))
    assert report.truncation_loss == truncation_mass_loss(grid)
    assert report.l2_nu is None


def test_weight_spec_needs_gamma():
    with pytest.raises(TypeError):
        WeightSpec(0.0625, 5.0)
