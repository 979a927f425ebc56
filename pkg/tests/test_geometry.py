import numpy as np
import pytest
from scipy import stats

from pkin.errors import ConfigurationError, DegenerateCycleError, InfiniteExitError, UsageError
from pkin.geometry import (
    BackTimeCycle,
    CycleEnd,
    SlabShape,
    backward_exit_time,
    ball,
    cycle_resides,
    ellipsoid,
    escape_curve,
    estimate_escape_probability,
    make_shape,
    near_grazing_indicator,
    sample_reflected_velocity,
    trace_back_time_cycle,
)


def test_slab_exit_time():
    slab = SlabShape(1.0)
    t_b, x_b = backward_exit_time(slab, [0.25, 0.0, 0.0], [0.5, 1.0, 0.0])
    assert t_b == pytest.approx(0.5)
    assert np.allclose(x_b, [0.0, -0.5, 0.0])
    t_b, x_b = backward_exit_time(slab, [0.25, 0.0, 0.0], [-0.25, 0.0, 0.0])
    assert t_b == pytest.approx(3.0)
    assert x_b[0] == 1.0


def test_slab_exit_parallel_to_walls():
    with pytest.raises(InfiniteExitError):
        backward_exit_time(SlabShape(1.0), [0.5, 0.0, 0.0], [0.0, 1.0, 0.0])
    with pytest.raises(InfiniteExitError):
        backward_exit_time(SlabShape(1.0), [0.5, 0.0, 0.0], [0.0, 0.0, 0.0])


def test_level_set_exit():
    t_b, x_b = backward_exit_time(ball(), np.zeros(3), [1.0, 0.0, 0.0])
    assert t_b == pytest.approx(1.0, abs=1e-10)
    assert np.allclose(x_b, [-1.0, 0.0, 0.0], atol=1e-10)
    t_b, _ = backward_exit_time(ellipsoid(), np.zeros(3), [0.0, 0.0, 2.0])
    assert t_b == pytest.approx(0.25, abs=1e-10)
    with pytest.raises(UsageError):
        backward_exit_time(ball(), [2.0, 0.0, 0.0], [1.0, 0.0, 0.0])


def test_reflected_normal_speed_is_rayleigh():
    slab = SlabShape(1.0)
    x = np.zeros(3)
    v = sample_reflected_velocity(slab, x, np.random.default_rng(0), size=5000)
    normal_speed = v @ slab.normal(x)
    assert np.all(normal_speed > 0)
    # Rayleigh(1): mean sqrt(pi/2), tangential components standard normal
    assert np.mean(normal_speed) == pytest.approx(np.sqrt(np.pi / 2.0), abs=0.05)
    assert np.std(v[:, 1]) == pytest.approx(1.0, abs=0.05)
    assert sample_reflected_velocity(slab, x, np.random.default_rng(1)).shape == (3,)


def test_reflected_normal_speed_passes_ks_at_scale():
    slab = SlabShape(1.0)
    x = np.zeros(3)
    v = sample_reflected_velocity(slab, x, np.random.default_rng(0), size=100000)
    assert stats.kstest(v @ slab.normal(x), "rayleigh").pvalue >= 0.01


def test_specular_cycle_times():
    cycle = trace_back_time_cycle(SlabShape(1.0), 0.0, [0.5, 0.0, 0.0], [1.0, 0.0, 0.0], -10.0, 3, fixed_speed=True)
    assert np.allclose(cycle.times, [0.0, -0.5, -1.5, -2.5])
    assert cycle.reason is CycleEnd.MAX_BOUNCES
    assert cycle.n_bounces == 3
    assert cycle_resides(SlabShape(1.0), cycle)


def test_cycle_stops_at_stop_time():
    cycle = trace_back_time_cycle(SlabShape(1.0), 0.0, [0.5, 0.0, 0.0], [1.0, 0.0, 0.0], -2.0, 10, fixed_speed=True)
    assert cycle.reason is CycleEnd.REACHED_STOP_TIME
    assert np.allclose(cycle.times, [0.0, -0.5, -1.5])


def test_diffuse_cycle_in_ball_resides():
    rng = np.random.default_rng(4)
    shape = ball()
    cycle = trace_back_time_cycle(shape, 0.0, np.zeros(3), [1.0, 0.0, 0.0], -5.0, 5, rng)
    assert np.all(np.diff(cycle.times) < 0)
    for _, x_k, _ in cycle.points[1:]:
        assert shape.on_boundary(x_k, tol=1e-8)
    assert cycle_resides(shape, cycle)


def test_cycle_outside_domain_is_detected():
    slab = SlabShape(1.0)
    cycle = BackTimeCycle(
        [(0.0, np.array([0.5, 0.0, 0.0]), np.array([-2.0, 0.0, 0.0])), (-1.0, np.array([2.5, 0.0, 0.0]), None)],
        CycleEnd.MAX_BOUNCES,
    )
    assert not cycle_resides(slab, cycle)


def test_cycle_argument_errors():
    slab = SlabShape(1.0)
    with pytest.raises(DegenerateCycleError):
        trace_back_time_cycle(slab, 0.0, np.zeros(3), [0.0, 1.0, 0.0], -1.0, 3, fixed_speed=True)
    with pytest.raises(UsageError):
        trace_back_time_cycle(slab, 0.0, [0.5, 0, 0], [1.0, 0, 0], 1.0, 3, fixed_speed=True)
    with pytest.raises(UsageError):
        trace_back_time_cycle(slab, 0.0, [0.5, 0, 0], [1.0, 0, 0], -1.0, 3)


def test_escape_probability_decreases_with_bounces():
    curve = escape_curve(SlabShape(1.0), (1, 2, 4), 2.0, n_samples=1000, seed=0)
    estimates = [point["estimate"] for point in curve]
    # the first bounce from the slab center is deterministic
    assert estimates[0] == 1.0
    assert estimates[0] > estimates[1] > estimates[2]


def test_escape_probability_needs_samples():
    rng = np.random.default_rng(0)
    with pytest.raises(ConfigurationError):
        estimate_escape_probability(SlabShape(1.0), 2, 2.0, 999, rng)
    with pytest.raises(ConfigurationError):
        estimate_escape_probability(SlabShape(1.0), 0, 2.0, 1000, rng)


@pytest.mark.parametrize(
    "v, expected",
    [([0.01, 1.0, 0.0], True), ([1.0, 0.5, 0.0], False), ([20.0, 0.0, 0.0], True), ([0.05, 0.0, 0.0], True)],
)
def test_near_grazing_indicator(v, expected):
    assert near_grazing_indicator(SlabShape(1.0), np.zeros(3), v, 0.1) is expected


def test_near_grazing_indicator_range():
    with pytest.raises(ConfigurationError):
        near_grazing_indicator(SlabShape(1.0), np.zeros(3), [1.0, 0.0, 0.0], 1.5)


def test_make_shape():
    assert isinstance(make_shape("slab", 2.0), SlabShape)
    assert make_shape("level_set", levelset="ellipsoid").name == "ellipsoid"
    with pytest.raises(ConfigurationError):
        make_shape("torus")
    with pytest.raises(ConfigurationError):
        make_shape("level_set", levelset="cube")
    with pytest.raises(ConfigurationError):
        SlabShape(0.0)
