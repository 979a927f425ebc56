import functools
import os

from pkin.collision import BgkSurrogate, build_collision_model
from pkin.equilibria import WallModel
from pkin.solvers import SlabProblem, SolverConfig
from pkin.vgrid import WeightSpec, build_velocity_grid


_CUR_DIR = os.path.dirname(os.path.abspath(__file__))

SMALL_CONFIG = f"{_CUR_DIR}/small.cfg"
ROOT_DIR = os.path.dirname(os.path.dirname(_CUR_DIR))

# T = 1 split into 20 steps: every step time is exact in binary up to the step count
PERIOD_STEPS = 20
N_SPACE = 8
WEIGHT = WeightSpec(q=0.0625, beta=5.0, gamma=1.0)


@functools.lru_cache(maxsize=None)
def kernel_grid():
    return build_velocity_grid(4.0, 8)


@functools.lru_cache(maxsize=None)
def kernel_model(gamma: float = 1.0):
    return build_collision_model(kernel_grid(), gamma=gamma, budget=1000, seed=0, stencil=1000, max_asymmetry=1.0)


@functools.lru_cache(maxsize=None)
def solver_grid():
    return build_velocity_grid(4.0, 6)


@functools.lru_cache(maxsize=None)
def bgk(gamma: float = 1.0):
    return BgkSurrogate(solver_grid(), gamma)


def weight_spec(gamma: float = 1.0) -> WeightSpec:
    return WeightSpec(q=0.0625, beta=max(5.0, 4.0 - gamma), gamma=gamma)


def solver_config(**kwargs) -> SolverConfig:
    return SolverConfig(period_steps=PERIOD_STEPS, **kwargs)


@functools.lru_cache(maxsize=None)
def full_model(gamma: float = 1.0):
    return build_collision_model(solver_grid(), gamma=gamma, budget=4000, seed=0, stencil=64, max_asymmetry=1.0)


def slab_problem(delta1: float = 0.02, delta2: float = 0.02, gamma: float = 1.0, full: bool = False) -> SlabProblem:
    walls = WallModel(theta_bar_left=1.0 + delta2, theta_bar_right=1.0 - delta2, delta1=delta1)
    collision = full_model(gamma) if full else bgk(gamma)
    return SlabProblem(solver_grid(), collision, walls, weight_spec(gamma), n_space=N_SPACE)
