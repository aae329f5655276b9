"""Run configuration: dataclasses plus an INI reader/writer.

A :class:`RunConfig` fully determines a run. It serialises to an INI file with
one section per component (``run``, ``env``, ``channel``, ``agent``) and parses
back to an equal object.
"""

from __future__ import annotations

import configparser
import dataclasses
import io
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

AGENT_KINDS = ("classic_clean", "classic_aperiodic", "motion_model", "blind")

GRID_MU_MS = (10.0, 30.0, 50.0, 70.0, 90.0)
GRID_P_MLR = (0.1, 0.3, 0.5, 0.7, 0.9)


class ConfigError(ValueError):
    """Raised for invalid or unparseable configuration."""


@dataclass
class EnvConfig:
    ramp_length: float = 200.0
    merge_zone_length: float = 100.0
    main_lane_visible_length: float = 400.0
    merge_point: float = 250.0
    dt: float = 0.05
    speed_limit: float = 33.0
    spawn_speed_min: float = 22.0
    spawn_speed_max: float = 34.0
    headway_mean: float = 3.25
    headway_std: float = 0.1
    accel_min: float = -5.0
    accel_max: float = 3.0
    emergency_decel: float = -9.0
    c_min: float = 0.2
    vehicle_length: float = 5.0
    idm_time_headway: float = 1.5
    idm_min_gap: float = 2.0
    idm_accel: float = 1.5
    idm_decel: float = 2.0
    idm_delta: float = 4.0
    ttc_threshold: float = 2.0
    ego_init_speed: float = 25.0
    stop_duration: float = 1.0
    max_episode_time: float = 40.0
    prepopulate: bool = True
    sentinel_gap: float = 400.0
    distance_scale: float = 400.0
    speed_scale: float = 34.0

    def validate(self) -> None:
        for name in ("ramp_length", "merge_zone_length", "main_lane_visible_length", "merge_point"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"env.{name} must be positive, got {getattr(self, name)}")
        if self.merge_zone_length > self.ramp_length:
            raise ConfigError("env.merge_zone_length cannot exceed env.ramp_length")
        if self.merge_point - self.ramp_length < 0:
            raise ConfigError("ramp start would lie upstream of the main-lane origin")
        if self.merge_point >= self.main_lane_visible_length:
            raise ConfigError("env.merge_point must lie inside the visible main lane")
        if not self.dt > 0:
            raise ConfigError("env.dt must be positive")
        if not 0 <= self.spawn_speed_min <= self.spawn_speed_max:
            raise ConfigError("env spawn speed range is invalid")
        if not (self.headway_mean > 0 and self.headway_std >= 0):
            raise ConfigError("env headway distribution is invalid")
        if not self.emergency_decel <= self.accel_min < 0 < self.accel_max:
            raise ConfigError("env acceleration bounds must satisfy emergency <= min < 0 < max")
        if not 0 < self.c_min <= 1:
            raise ConfigError("env.c_min must lie in (0, 1]")
        if self.vehicle_length <= 0 or self.ego_init_speed < 0:
            raise ConfigError("env vehicle length / ego speed invalid")


@dataclass
class ChannelConfig:
    mu_delay_ms: float = 50.0
    sigma_delay_ms: float = 23.0
    p_mlr: float = 0.7
    generation_rules: bool = False
    seed: int = 0
    bypass: bool = False

    def validate(self) -> None:
        if not 0.0 <= self.p_mlr <= 1.0:
            raise ConfigError(f"channel.p_mlr must lie in [0, 1], got {self.p_mlr}")
        if self.sigma_delay_ms < 0:
            raise ConfigError("channel.sigma_delay_ms must be >= 0")
        if not self.mu_delay_ms > 0:
            raise ConfigError("channel.mu_delay_ms must be > 0")


@dataclass
class AgentConfig:
    gamma: float = 0.98
    actor_lr: float = 1e-4
    critic_lr: float = 1e-3
    target_coeff: float = 1e-3
    replay_capacity: int = 400_000
    batch_size: int = 64
    ou_sigma: float = 0.4
    ou_theta: float = 0.2
    tau: float = 0.1
    alpha: float = 0.02
    approx_order: int = 1
    policy_std: float = 0.1
    hidden: int = 64
    replay: bool = True
    policy_gradient: str = "gaussian"
    agent_period: float = 0.05
    max_train_steps: int = 0

    def validate(self) -> None:
        if not 0 < self.gamma < 1:
            raise ConfigError("agent.gamma must lie in (0, 1)")
        if not (self.actor_lr > 0 and self.critic_lr > 0):
            raise ConfigError("learning rates must be positive")
        if not 0 <= self.target_coeff <= 1:
            raise ConfigError("agent.target_coeff must lie in [0, 1]")
        if self.replay_capacity < self.batch_size or self.batch_size < 1:
            raise ConfigError("replay capacity must hold at least one batch")
        if not self.tau > 0:
            raise ConfigError("agent.tau must be positive")
        if not self.alpha > 0:
            raise ConfigError("agent.alpha must be positive")
        if self.approx_order < 1:
            raise ConfigError("agent.approx_order must be >= 1")
        if self.policy_gradient not in ("gaussian", "deterministic"):
            raise ConfigError(f"unknown policy_gradient {self.policy_gradient!r}")
        if not (self.policy_std > 0 and self.agent_period > 0 and self.hidden >= 1):
            raise ConfigError("policy_std, agent_period and hidden must be positive")
        if self.max_train_steps < 0:
            raise ConfigError("agent.max_train_steps must be >= 0")


@dataclass
class RunSection:
    kind: str = "blind"
    seed: int = 0
    episodes: int = 2000
    outdir: str = "runs/default"
    eval_episodes_per_cell: int = 200
    grid_mu_ms: tuple[float, ...] = GRID_MU_MS
    grid_p_mlr: tuple[float, ...] = GRID_P_MLR
    grid_sigma_ms: float = 23.0

    def validate(self) -> None:
        if self.kind not in AGENT_KINDS:
            raise ConfigError(f"run.kind must be one of {AGENT_KINDS}, got {self.kind!r}")
        if self.episodes < 1 or self.eval_episodes_per_cell < 1:
            raise ConfigError("episode counts must be >= 1")
        if not self.grid_mu_ms or not self.grid_p_mlr:
            raise ConfigError("evaluation grid must be non-empty")


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    env: EnvConfig = field(default_factory=EnvConfig)
    channel: ChannelConfig = field(default_factory=ChannelConfig)
    agent: AgentConfig = field(default_factory=AgentConfig)

    def validate(self) -> "RunConfig":
        self.run.validate()
        self.env.validate()
        self.channel.validate()
        self.agent.validate()
        return self

    def replace(self, **sections: dict[str, Any]) -> "RunConfig":
        """Copy with per-section overrides, e.g. ``cfg.replace(agent={"tau": 0.2})``."""
        parts = {}
        for f in fields(self):
            sub = getattr(self, f.name)
            parts[f.name] = dataclasses.replace(sub, **sections.get(f.name, {}))
        return RunConfig(**parts)

    def to_ini(self) -> str:
        parser = configparser.ConfigParser(interpolation=None)
        for f in fields(self):
            sub = getattr(self, f.name)
            parser[f.name] = {sf.name: _format(getattr(sub, sf.name)) for sf in fields(sub)}
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()

    @classmethod
    def from_ini(cls, text: str) -> "RunConfig":
        parser = configparser.ConfigParser(interpolation=None)
        try:
            parser.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(str(exc)) from exc
        cfg = cls()
        for f in fields(cfg):
            if f.name not in parser:
                continue
            sub = getattr(cfg, f.name)
            known = {sf.name: sf for sf in fields(sub)}
            for key, raw in parser[f.name].items():
                if key not in known:
                    raise ConfigError(f"unknown key {f.name}.{key}")
                default = getattr(sub, key)
                setattr(sub, key, _parse(raw, default, f"{f.name}.{key}"))
        return cfg.validate()

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_ini(text)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_ini())


def _format(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ", ".join(str(v) if isinstance(v, int) else repr(float(v)) for v in value)
    return str(value)


def _parse(raw: str, default: Any, name: str) -> Any:
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("true", "yes", "on", "1"):
                return True
            if low in ("false", "no", "off", "0"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(float(x) for x in raw.split(",") if x.strip())
    except ValueError as exc:
        raise ConfigError(f"bad value for {name}: {raw!r}") from exc
    return raw


@dataclass
class TuneSpec:
    """Random-search ranges. Ranges are inclusive (low, high) pairs."""

    alpha_range: tuple[float, float] = (0.005, 0.1)
    tau_choices: tuple[float, ...] = (0.05, 0.1, 0.2)
    steps_choices: tuple[int, ...] = (0,)
    trials: int = 8
    seed: int = 0
    final_window_frac: float = 0.1

    def validate(self) -> "TuneSpec":
        lo, hi = self.alpha_range
        if not 0 < lo <= hi:
            raise ConfigError("tune alpha range must satisfy 0 < low <= high")
        if not self.tau_choices or not self.steps_choices:
            raise ConfigError("tune choice lists must be non-empty")
        if any(t <= 0 for t in self.tau_choices) or any(s < 0 for s in self.steps_choices):
            raise ConfigError("tune tau choices must be positive and step budgets >= 0")
        if self.trials < 1:
            raise ConfigError("tune trials must be >= 1")
        if not 0 < self.final_window_frac <= 1:
            raise ConfigError("final_window_frac must lie in (0, 1]")
        return self

    @classmethod
    def from_ini(cls, text: str) -> "TuneSpec":
        """Read the optional ``[tune]`` section of a run config file."""
        parser = configparser.ConfigParser(interpolation=None)
        try:
            parser.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(str(exc)) from exc
        spec = cls()
        if "tune" in parser:
            known = {f.name for f in fields(spec)}
            for key, raw in parser["tune"].items():
                if key not in known:
                    raise ConfigError(f"unknown key tune.{key}")
                value = _parse(raw, getattr(spec, key), f"tune.{key}")
                if key == "steps_choices":
                    value = tuple(int(v) for v in value)
                setattr(spec, key, value)
        return spec.validate()

    def to_ini(self) -> str:
        parser = configparser.ConfigParser(interpolation=None)
        parser["tune"] = {f.name: _format(getattr(self, f.name)) for f in fields(self)}
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()
