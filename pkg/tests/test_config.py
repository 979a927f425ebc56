import json

import numpy as np
import pytest

from pkin.config import RunSpec, apply_overrides, load_spec, parse_spec, render_spec
from pkin.errors import ConfigurationError
from tests.fixtures import SMALL_CONFIG


def test_defaults_round_trip():
    spec = RunSpec()
    assert parse_spec(render_spec(spec)) == spec
    assert spec.solver.j_schedule[-1] == np.inf


def test_parse():
    text = """
    # periodic run
    model.gamma = -1.0   # soft potential
    grid.n_per_axis = 12
    solver.j_schedule = 4, 16, inf
    solver.allow_large_data = true
    run.mode = periodic
    """
    spec = parse_spec(text)
    assert spec.model.gamma == -1.0
    assert spec.grid.n_per_axis == 12
    assert spec.solver.j_schedule == (4, 16, np.inf)
    assert spec.solver.allow_large_data is True
    assert spec.run.mode == "periodic"
    assert spec.grid.v_max == RunSpec().grid.v_max


def test_small_config():
    spec = load_spec(SMALL_CONFIG)
    assert spec.model.collision == "bgk"
    assert spec.solver.period_steps == 20
    assert parse_spec(render_spec(spec)) == spec


@pytest.mark.parametrize(
    "text, message",
    [
        ("model.gama = 1.0", "unknown key 'model.gama'"),
        ("physics.gamma = 1.0", "unknown block"),
        ("gamma = 1.0", "malformed key"),
        ("model.gamma 1.0", "line 1"),
        ("model.gamma = 1.0\nmodel.gamma = 0.5", "set twice"),
        ("solver.allow_large_data = yes", "cannot read"),
        ("grid.n_per_axis = 8.5", "cannot read"),
        ("solver.j_schedule = 4, , inf", "malformed list"),
        ("run.mode = simulate", "unknown run.mode"),
    ],
)
def test_parse_errors(text, message):
    with pytest.raises(ConfigurationError) as info:
        parse_spec(text)
    assert message in str(info.value)


def test_solver_block_is_validated():
    with pytest.raises(ConfigurationError):
        parse_spec("solver.epsilon_schedule = 0.1, 0.2")


def test_overrides():
    spec = apply_overrides(RunSpec(), ["wall.delta1=0.02", "run.seed = 7"])
    assert spec.wall.delta1 == 0.02
    assert spec.run.seed == 7
    assert spec.model == RunSpec().model
    with pytest.raises(ConfigurationError):
        apply_overrides(spec, ["wall.delta1"])
    with pytest.raises(ConfigurationError):
        apply_overrides(spec, ["wall.delta3=0.1"])


def test_to_dict_is_json():
    values = RunSpec().to_dict()
    assert values["solver"]["j_schedule"][-1] == "inf"
    assert json.loads(json.dumps(values)) == values


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigurationError):
        load_spec(str(tmp_path / "none.cfg"))


def test_verify_checks_keep_their_commas():
    spec = apply_overrides(RunSpec(), ["verify.checks=flux_normalization,iteration_lemma"])
    assert spec.verify.checks == "flux_normalization,iteration_lemma"
    assert RunSpec().verify.checks == "all"
    assert RunSpec().solver.coarse_modes == 8
