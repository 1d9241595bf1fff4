"""Run configuration: one JSON document drives every command.

All commands share a single schema.  Unspecified keys fall back to the
package defaults, unknown keys are rejected by their dotted name, and the
effective configuration is echoed verbatim into the run directory, so any
finished run can be reproduced from its echo alone.
"""
from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field, replace

from .control import (DEFAULT_GAIN_RATIO, DEFAULT_K_OFFSET, DEFAULT_LOOKAHEAD,
                      DEFAULT_Q_CUTOFF_HZ, DESIGN_SPEED)
from .dynamics import VehicleParams
from .scenario import TASKS, ScenarioConfig, make_scenario
from .train import PpoConfig
from .transfer import DEFAULT_SPEED_CAP, ModelingGap


class ConfigError(ValueError):
    """A configuration document or override failed validation."""


# -- sections -------------------------------------------------------------------


@dataclass(frozen=True)
class ControllerConfig:
    """Synthesis settings for the tracking controller."""

    vx: float = DESIGN_SPEED                 # design speed, m/s
    lookahead: float = DEFAULT_LOOKAHEAD     # preview distance, m
    ratio: float = DEFAULT_GAIN_RATIO        # heading/offset gain ratio
    k_offset: float = DEFAULT_K_OFFSET       # composite-error gain, rad/m
    q_cutoff_hz: float = DEFAULT_Q_CUTOFF_HZ
    dob: bool = True

    def __post_init__(self):
        for name in ("vx", "lookahead", "ratio", "k_offset", "q_cutoff_hz"):
            if getattr(self, name) <= 0.0:
                raise ConfigError(f"controller.{name} must be positive")

    @property
    def k_heading(self) -> float:
        return self.ratio * self.k_offset

    def design_kwargs(self) -> dict:
        """Keyword arguments accepted by design_controller()."""
        return {"vx": self.vx, "lookahead": self.lookahead,
                "k_heading": self.k_heading, "k_offset": self.k_offset,
                "q_cutoff_hz": self.q_cutoff_hz, "dob": self.dob}


@dataclass(frozen=True)
class TransferConfig:
    """Episode-level settings of the transfer experiment runner."""

    episodes: int = 10
    plan_horizon: int = 50
    replan_every: int = 1
    speed_cap: float | None = DEFAULT_SPEED_CAP  # null tracks the plan as is
    maneuver_offset: float = 0.5                 # m, governs the speed governor

    def __post_init__(self):
        if self.episodes < 1:
            raise ConfigError("transfer.episodes must be at least 1")
        if self.plan_horizon < 2:
            raise ConfigError("transfer.plan_horizon must be at least 2")
        if self.replan_every < 1:
            raise ConfigError("transfer.replan_every must be at least 1")
        if self.speed_cap is not None and self.speed_cap <= 0.0:
            raise ConfigError("transfer.speed_cap must be positive or null")
        if self.maneuver_offset < 0.0:
            raise ConfigError("transfer.maneuver_offset must be nonnegative")


_VEHICLE_FIELDS = tuple(f.name for f in dataclasses.fields(VehicleParams))
_SCENARIO_FIELDS = tuple(f.name for f in dataclasses.fields(ScenarioConfig)
                         if f.name != "task")


@dataclass(frozen=True)
class RunConfig:
    """Everything one command needs, serializable to a single JSON file.

    ``seed`` is the run's master seed: when set it overrides ``ppo.seed``
    for training and seeds evaluation/transfer episode draws.  ``vehicle``
    and ``scenario`` hold sparse field overrides (absolute values) applied
    on top of the nominal vehicle and the task's scenario defaults.
    """

    task: str = "lk"
    seed: int | None = None
    out: str | None = None          # run directory; None derives one
    checkpoint: str | None = None   # evaluate/transfer: policy to load
    resume: str | None = None       # train: checkpoint to continue from
    require_convergence: bool = False
    samples: int = 100              # analyze: sampled-plant count
    gap_sweep: tuple = ()           # transfer: sweep of gap levels
    vehicle: dict = field(default_factory=dict)
    scenario: dict = field(default_factory=dict)
    ppo: PpoConfig = field(default_factory=PpoConfig)
    controller: ControllerConfig = field(default_factory=ControllerConfig)
    gap: ModelingGap = field(default_factory=ModelingGap)
    transfer: TransferConfig = field(default_factory=TransferConfig)

    def __post_init__(self):
        if self.task not in TASKS + ("all",):
            raise ConfigError(
                f"task must be one of {TASKS + ('all',)}, got {self.task!r}")
        if self.samples < 1:
            raise ConfigError("samples must be at least 1")
        for key in self.vehicle:
            if key not in _VEHICLE_FIELDS:
                raise ConfigError(f"unknown config key {'vehicle.' + key!r}")
        for key in self.scenario:
            if key not in _SCENARIO_FIELDS:
                raise ConfigError(f"unknown config key {'scenario.' + key!r}")
        object.__setattr__(self, "gap_sweep",
                           tuple(float(v) for v in self.gap_sweep))
        for level in self.gap_sweep:
            if level < 0.0:
                raise ConfigError("gap_sweep levels must be nonnegative")
        # Constructing the override targets validates the values right away.
        self.vehicle_params()
        self.scenario_config("lk" if self.task == "all" else self.task)

    def vehicle_params(self) -> VehicleParams:
        try:
            return replace(VehicleParams(), **self.vehicle)
        except ValueError as err:
            raise ConfigError(str(err)) from err

    def scenario_config(self, task: str | None = None) -> ScenarioConfig:
        try:
            return make_scenario(task or self.task, **self.scenario)
        except ValueError as err:
            raise ConfigError(f"scenario: {err}") from err

    def tasks(self) -> tuple:
        return TASKS if self.task == "all" else (self.task,)

    def master_seed(self) -> int:
        return 0 if self.seed is None else self.seed

    def ppo_config(self) -> PpoConfig:
        if self.seed is None or self.seed == self.ppo.seed:
            return self.ppo
        return replace(self.ppo, seed=self.seed)

    def gaps(self) -> list:
        """The gap list a transfer run iterates over."""
        if not self.gap_sweep:
            return [self.gap]
        if self.gap.kind == "none":
            raise ConfigError("gap_sweep requires gap.kind to name the "
                              "swept axis (param_variation or side_force)")
        if self.gap.kind == "param_variation":
            return [ModelingGap("param_variation", variation_bound=v)
                    for v in self.gap_sweep]
        return [ModelingGap("side_force", side_force_N=v)
                for v in self.gap_sweep]


# -- serialization ----------------------------------------------------------------

_SECTION_TYPES = {"ppo": PpoConfig, "controller": ControllerConfig,
                  "transfer": TransferConfig, "gap": ModelingGap}
_TOP_KEYS = frozenset(f.name for f in dataclasses.fields(RunConfig))


def _tupled(value):
    return tuple(_tupled(v) for v in value) if isinstance(value, list) else value


def _listed(value):
    return list(map(_listed, value)) if isinstance(value, tuple) else value


def _build_section(cls, data: dict, section: str):
    allowed = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in allowed:
            raise ConfigError(f"unknown config key {section + '.' + key!r}")
    try:
        return cls(**{k: _tupled(v) for k, v in data.items()})
    except ConfigError:
        raise
    except (TypeError, ValueError) as err:
        raise ConfigError(f"{section}: {err}") from err


def config_from_dict(data: dict) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("configuration root must be a JSON object")
    kwargs = {}
    for key, value in data.items():
        if key not in _TOP_KEYS:
            raise ConfigError(f"unknown config key {key!r}")
        if key in _SECTION_TYPES or key in ("vehicle", "scenario"):
            if not isinstance(value, dict):
                raise ConfigError(f"config section {key!r} must be an object")
        if key in _SECTION_TYPES:
            kwargs[key] = _build_section(_SECTION_TYPES[key], value, key)
        elif key in ("vehicle", "scenario"):
            kwargs[key] = {k: _tupled(v) for k, v in value.items()}
        elif key == "gap_sweep":
            if not isinstance(value, list):
                raise ConfigError("gap_sweep must be a list of numbers")
            kwargs[key] = tuple(value)
        else:
            kwargs[key] = value
    try:
        return RunConfig(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as err:
        raise ConfigError(str(err)) from err


def config_to_dict(cfg: RunConfig) -> dict:
    """Plain-JSON image of a config; floats survive the roundtrip exactly."""
    return {
        "task": cfg.task,
        "seed": cfg.seed,
        "out": cfg.out,
        "checkpoint": cfg.checkpoint,
        "resume": cfg.resume,
        "require_convergence": cfg.require_convergence,
        "samples": cfg.samples,
        "gap_sweep": list(cfg.gap_sweep),
        "vehicle": {k: _listed(v) for k, v in cfg.vehicle.items()},
        "scenario": {k: _listed(v) for k, v in cfg.scenario.items()},
        "ppo": dataclasses.asdict(cfg.ppo),
        "controller": dataclasses.asdict(cfg.controller),
        "gap": dataclasses.asdict(cfg.gap),
        "transfer": dataclasses.asdict(cfg.transfer),
    }


def load_config(path) -> RunConfig:
    try:
        with open(os.fspath(path), encoding="utf-8") as fh:
            data = json.load(fh)
    except OSError as err:
        raise ConfigError(f"cannot read config file: {err}") from err
    except json.JSONDecodeError as err:
        raise ConfigError(f"{path}: invalid JSON: {err}") from err
    return config_from_dict(data)


def save_config(path, cfg: RunConfig) -> None:
    with open(os.fspath(path), "w", encoding="utf-8") as fh:
        json.dump(config_to_dict(cfg), fh, indent=2, sort_keys=True)
        fh.write("\n")
