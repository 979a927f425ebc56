"""
Run configuration: a flat `block.key = value` text grammar over frozen block dataclasses.

    # comment
    model.gamma = 1.0
    solver.j_schedule = 4, 16, 64, inf
    solver.allow_large_data = false

Every key has a default; unknown blocks or keys are rejected.
"""

import dataclasses
import logging
import os
import typing
from dataclasses import dataclass, field

import termcolor as tc

from pkin.errors import ConfigurationError
from pkin.solvers import SolverConfig


MODES = ("steady", "periodic", "evolve", "fit-decay", "verify", "kernel-cache")


@dataclass(frozen=True)
class ModelBlock:
    gamma: float = 1.0
    b: str = "cos"
    m: float = 1.0
    q: float = 0.0625
    beta: float = 5.0
    budget: int = 20000
    stencil: int = 64
    max_asymmetry: float = 0.05
    max_budget: int = 160000
    workers: int = 1
    collision: str = "bgk"


@dataclass(frozen=True)
class GridBlock:
    v_max: float = 6.0
    n_per_axis: int = 16
    n_space: int = 64
    slab_length: float = 1.0
    domain: str = "slab"
    levelset: str = "ball"


@dataclass(frozen=True)
class WallBlock:
    period_T: float = 1.0
    theta_bar_left: float = 1.0
    theta_bar_right: float = 1.0
    delta1: float = 0.0
    shape: str = "sin"


@dataclass(frozen=True)
class RunBlock:
    seed: int = 0
    mode: str = "verify"
    output: str = "out"
    cache_dir: str = ".pkin-cache"
    # series.csv consumed by fit-decay; empty means <output>/series.csv
    series: str = ""


@dataclass(frozen=True)
class VerifyBlock:
    v_max: float = 4.0
    n_per_axis: int = 8
    budget: int = 2000
    n_space: int = 16
    period_steps: int = 40
    checks: str = "all"


@dataclass(frozen=True)
class RunSpec:
    model: ModelBlock = field(default_factory=ModelBlock)
    grid: GridBlock = field(default_factory=GridBlock)
    wall: WallBlock = field(default_factory=WallBlock)
    solver: SolverConfig = field(default_factory=SolverConfig)
    run: RunBlock = field(default_factory=RunBlock)
    verify: VerifyBlock = field(default_factory=VerifyBlock)

    def to_dict(self) -> dict:
        return {block.name: _block_values(getattr(self, block.name)) for block in dataclasses.fields(self)}


BLOCKS = tuple(f.name for f in dataclasses.fields(RunSpec))


def _block_values(block) -> dict:
    values = {}
    for f in dataclasses.fields(block):
        value = getattr(block, f.name)
        values[f.name] = [_json_number(v) for v in value] if isinstance(value, tuple) else _json_number(value)
    return values


def _json_number(value):
    if isinstance(value, float) and value in (float("inf"), float("-inf")):
        return repr(value)
    return value


def _parse_scalar(key: str, hint, text: str):
    try:
        if hint is bool:
            if text not in ("true", "false"):
                raise ValueError(text)
            return text == "true"
        if hint is int:
            return int(text)
        if hint is float:
            return float(text)
    except ValueError:
        raise ConfigurationError(f"{key}: cannot read {text!r} as {hint.__name__}") from None
    return text


def _parse_list_item(key: str, text: str):
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        raise ConfigurationError(f"{key}: list entry {text!r} is not a number") from None


def _parse_value(key: str, hint, text: str):
    if hint is tuple:
        items = [item.strip() for item in text.split(",")]
        if any(item == "" for item in items):
            raise ConfigurationError(f"{key}: malformed list {text!r}")
        return tuple(_parse_list_item(key, item) for item in items)
    return _parse_scalar(key, hint, text)


def _render_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(_render_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _split_key(key: str) -> tuple[str, str]:
    block, dot, name = key.partition(".")
    if not dot or not name:
        raise ConfigurationError(f"malformed key {key!r}, expected block.key")
    if block not in BLOCKS:
        raise ConfigurationError(f"unknown block in key {key!r}, expected one of {list(BLOCKS)}")
    return block, name


def _assign(values: dict, key: str, text: str) -> None:
    block, name = _split_key(key)
    block_type = type(getattr(RunSpec(), block))
    hints = typing.get_type_hints(block_type)
    if name not in {f.name for f in dataclasses.fields(block_type)}:
        raise ConfigurationError(f"unknown key {key!r}")
    values.setdefault(block, {})[name] = _parse_value(key, hints[name], text)


def _build(values: dict, base: RunSpec) -> RunSpec:
    blocks = {}
    for block in BLOCKS:
        current = getattr(base, block)
        blocks[block] = dataclasses.replace(current, **values[block]) if block in values else current
    spec = RunSpec(**blocks)
    if spec.run.mode not in MODES:
        raise ConfigurationError(f"unknown run.mode {spec.run.mode!r}, expected one of {list(MODES)}")
    return spec


def parse_spec(text: str, base: RunSpec = None) -> RunSpec:
    values = {}
    seen = set()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, eq, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not eq or not key:
            raise ConfigurationError(f"line {lineno}: expected 'block.key = value', got {raw.strip()!r}")
        if key in seen:
            raise ConfigurationError(f"line {lineno}: key {key!r} is set twice")
        seen.add(key)
        _assign(values, key, value)
    return _build(values, base or RunSpec())


def render_spec(spec: RunSpec) -> str:
    lines = []
    for block in BLOCKS:
        for f in dataclasses.fields(getattr(spec, block)):
            lines.append(f"{block}.{f.name} = {_render_value(getattr(getattr(spec, block), f.name))}")
        lines.append("")
    return "\n".join(lines)


def apply_overrides(spec: RunSpec, overrides: list[str]) -> RunSpec:
    values = {}
    for override in overrides or []:
        key, eq, value = override.partition("=")
        if not eq:
            raise ConfigurationError(f"malformed override {override!r}, expected block.key=value")
        _assign(values, key.strip(), value.strip())
        logging.info(f"Override {tc.colored(key.strip(), 'blue')} = {value.strip()}")
    return _build(values, spec)


def load_spec(path: str) -> RunSpec:
    if not os.path.exists(path):
        raise ConfigurationError(f"config file {path} does not exist")
    with open(path, "r") as f:
        text = f.read()
    logging.info(f"Read config from {tc.colored(path, 'blue')}")
    return parse_spec(text)
