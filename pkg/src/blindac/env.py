"""Kinematic highway on-ramp merging simulation.

One main lane and one on-ramp share a longitudinal coordinate ``x`` (metres).
Main-lane traffic follows an IDM car-following law with a cooperative yielding
term; the ego vehicle on the ramp is driven by a commanded longitudinal
acceleration. Everything is seeded, so ``(config, seed)`` fixes an episode.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .config import ConfigError, EnvConfig

MAIN = "main"
RAMP = "ramp"

RUNNING = "running"
MERGED = "merged"
COLLIDED = "collided"
STOPPED = "stopped"

EV_NONE = "none"
EV_MERGED = "merged"
EV_COLLISION = "collision"
EV_STOP = "stop"
EV_EMERGENCY = "emergency_braking"

STATE_DIM = 8
STATE_NAMES = ("d_cav", "v_cav", "d_p1", "d_f1", "v_f1", "d_p2", "d_f2", "v_f2")


class EpisodeOverError(RuntimeError):
    """Raised when stepping an episode that already terminated."""


@dataclass(slots=True)
class Vehicle:
    id: int
    lane: str
    x: float
    v: float
    a: float = 0.0
    cooperation: float = 1.0
    length: float = 5.0
    emergency: bool = False


@dataclass(frozen=True)
class RampGeometry:
    ramp_length: float
    merge_zone_length: float
    main_lane_visible_length: float
    merge_point: float

    @classmethod
    def from_config(cls, cfg: EnvConfig) -> "RampGeometry":
        geo = cls(cfg.ramp_length, cfg.merge_zone_length, cfg.main_lane_visible_length, cfg.merge_point)
        if min(geo.ramp_length, geo.merge_zone_length, geo.main_lane_visible_length, geo.merge_point) <= 0:
            raise ConfigError("ramp geometry lengths must be positive")
        return geo

    @property
    def ramp_start(self) -> float:
        return self.merge_point - self.ramp_length

    @property
    def zone_start(self) -> float:
        return self.merge_point - self.merge_zone_length

    def in_zone(self, x: float) -> bool:
        return self.zone_start <= x <= self.merge_point


@dataclass
class EnvState:
    sim_time: float
    ego: Vehicle
    traffic: list[Vehicle]
    geometry: RampGeometry
    episode_status: str = RUNNING
    next_spawn_time: float = 0.0
    next_id: int = 1
    stopped_time: float = 0.0
    spawn_times: list[float] = field(default_factory=list)


@dataclass(frozen=True)
class StepOutcome:
    reward_raw: float
    terminal: bool
    event: str
    emergency_onsets: int = 0


def advance(x: float, v: float, a: float, dt: float) -> tuple[float, float, float]:
    """Exact constant-acceleration motion with the speed floored at zero.

    Returns ``(x', v', time_spent_at_zero_speed)``.
    """
    v_new = v + a * dt
    if v_new >= 0.0:
        return x + v * dt + 0.5 * a * dt * dt, v_new, 0.0
    t_stop = -v / a
    return x + v * t_stop + 0.5 * a * t_stop * t_stop, 0.0, dt - t_stop


def idm_acceleration(v: float, cfg: EnvConfig, lead_gap: Optional[float] = None, lead_v: float = 0.0) -> float:
    free = 1.0 - (v / cfg.speed_limit) ** cfg.idm_delta
    if lead_gap is None:
        return cfg.idm_accel * free
    dyn = v * cfg.idm_time_headway + v * (v - lead_v) / (2.0 * math.sqrt(cfg.idm_accel * cfg.idm_decel))
    s_star = cfg.idm_min_gap + max(0.0, dyn)
    s = max(lead_gap, 1e-3)
    return cfg.idm_accel * (free - (s_star / s) ** 2)


def _ttc(gap: float, v: float, lead_v: float) -> float:
    if gap <= 0.0:
        return 0.0
    closing = v - lead_v
    return gap / closing if closing > 0.0 else math.inf


def cooperative_driver_policy(
    vehicle: Vehicle,
    leader: Optional[Vehicle],
    ego: Optional[Vehicle],
    cfg: EnvConfig,
    ego_in_zone: bool = False,
) -> float:
    """Main-lane acceleration: IDM car following blended with yielding to the ego.

    The ego's projection on the main lane acts as a virtual leader when it is
    inside the merge zone and ahead of ``vehicle``. The yielding weight grows
    linearly from 0 at ``C = c_min`` to 1 at ``C = 1``. The result is clamped
    to the normal band, or down to the emergency floor when the time to
    collision with a considered leader drops below ``cfg.ttc_threshold``.
    """
    if leader is None:
        a_cf = idm_acceleration(vehicle.v, cfg)
        ttc = math.inf
    else:
        gap = leader.x - leader.length - vehicle.x
        a_cf = idm_acceleration(vehicle.v, cfg, gap, leader.v)
        ttc = _ttc(gap, vehicle.v, leader.v)

    a = a_cf
    weight = (vehicle.cooperation - cfg.c_min) / (1.0 - cfg.c_min) if cfg.c_min < 1.0 else 0.0
    weight = min(max(weight, 0.0), 1.0)
    if weight > 0.0 and ego is not None and ego_in_zone and ego.x > vehicle.x:
        ego_gap = ego.x - ego.length - vehicle.x
        a_yield = min(a_cf, idm_acceleration(vehicle.v, cfg, ego_gap, ego.v))
        a = (1.0 - weight) * a_cf + weight * a_yield
        ttc = min(ttc, _ttc(ego_gap, vehicle.v, ego.v))

    lower = cfg.emergency_decel if ttc < cfg.ttc_threshold else cfg.accel_min
    return min(max(a, lower), cfg.accel_max)


def observe(state: EnvState, cfg: EnvConfig) -> np.ndarray:
    """Raw (unnormalised) 8-feature state vector around the ego."""
    ego = state.ego
    sentinel = cfg.sentinel_gap
    preceding: list[Vehicle] = []
    following: list[Vehicle] = []
    # traffic is sorted by x descending
    for veh in state.traffic:
        if veh.x >= ego.x:
            preceding.append(veh)
        else:
            following.append(veh)
    preceding.reverse()

    def pgap(k: int) -> float:
        if k >= len(preceding):
            return sentinel
        veh = preceding[k]
        return min(max(veh.x - veh.length - ego.x, 0.0), sentinel)

    def fgap(k: int) -> tuple[float, float]:
        if k >= len(following):
            return sentinel, 0.0
        veh = following[k]
        return min(max(ego.x - ego.length - veh.x, 0.0), sentinel), veh.v - ego.v

    d_f1, v_f1 = fgap(0)
    d_f2, v_f2 = fgap(1)
    d_cav = state.geometry.merge_point - ego.x
    return np.array([d_cav, ego.v, pgap(0), d_f1, v_f1, pgap(1), d_f2, v_f2])


def normalize_state(s: np.ndarray, cfg: EnvConfig) -> np.ndarray:
    scale = np.array(
        [cfg.distance_scale, cfg.speed_scale, cfg.distance_scale, cfg.distance_scale,
         cfg.speed_scale, cfg.distance_scale, cfg.distance_scale, cfg.speed_scale]
    )
    return s / scale


def shaping_reward(d_p1: float, d_f1: float, alpha: float) -> float:
    return -alpha * abs(math.exp(-d_p1 / 100.0) - math.exp(-d_f1 / 100.0))


def in_zone_feature(d_cav: float, cfg: EnvConfig) -> bool:
    return 0.0 <= d_cav <= cfg.merge_zone_length


def state_reward(s: np.ndarray, alpha: float, cfg: EnvConfig) -> float:
    """Non-terminal reward recomputed from a state vector alone."""
    if in_zone_feature(float(s[0]), cfg):
        return shaping_reward(float(s[2]), float(s[3]), alpha)
    return 0.0


def reward(next_state: EnvState, outcome_event: str, alpha: float, cfg: EnvConfig) -> float:
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    if outcome_event == EV_MERGED:
        return 1.0
    if outcome_event in (EV_COLLISION, EV_STOP):
        return -1.0
    if next_state.episode_status == RUNNING and next_state.geometry.in_zone(next_state.ego.x):
        s = observe(next_state, cfg)
        return shaping_reward(float(s[2]), float(s[3]), alpha)
    return 0.0


class MergeEnv:
    """Seeded on-ramp merging episode.

    ``reset`` builds the initial state, ``step`` advances it in place by one
    tick and returns the state together with the tick's outcome.
    """

    def __init__(self, cfg: EnvConfig, alpha: float = 0.02, record_trace: bool = False):
        cfg.validate()
        if alpha <= 0:
            raise ConfigError("alpha must be positive")
        self.cfg = cfg
        self.alpha = alpha
        self.geometry = RampGeometry.from_config(cfg)
        self.record_trace = record_trace
        self.trace: list[tuple] = []
        self.state: Optional[EnvState] = None
        self.rng: Optional[np.random.Generator] = None

    # -- lifecycle -------------------------------------------------------

    def reset(self, seed: int, populate: Optional[bool] = None) -> EnvState:
        cfg = self.cfg
        self.rng = np.random.default_rng(seed)
        geo = self.geometry
        ego = Vehicle(0, RAMP, geo.ramp_start, cfg.ego_init_speed, 0.0, 1.0, cfg.vehicle_length)
        state = EnvState(0.0, ego, [], geo)
        populate = cfg.prepopulate if populate is None else populate
        if populate:
            x = geo.main_lane_visible_length - self.rng.uniform(0.0, 1.0) * cfg.headway_mean * cfg.speed_limit
            while x >= 0.0:
                veh = self._new_vehicle(state, x)
                state.traffic.append(veh)
                x -= self._headway() * veh.v
        state.next_spawn_time = self._headway()
        self.state = state
        self.trace = []
        if self.record_trace:
            self._record(EV_NONE)
        return state

    def _headway(self) -> float:
        h = self.rng.normal(self.cfg.headway_mean, self.cfg.headway_std)
        return max(h, 1e-3)

    def _new_vehicle(self, state: EnvState, x: float) -> Vehicle:
        cfg = self.cfg
        v = self.rng.uniform(cfg.spawn_speed_min, cfg.spawn_speed_max)
        c = self.rng.uniform(cfg.c_min, 1.0)
        veh = Vehicle(state.next_id, MAIN, x, v, 0.0, c, cfg.vehicle_length)
        state.next_id += 1
        return veh

    def observe(self) -> np.ndarray:
        return observe(self.state, self.cfg)

    # -- dynamics --------------------------------------------------------

    def step(self, ego_accel: float, dt: Optional[float] = None) -> tuple[EnvState, StepOutcome]:
        state = self.state
        if state is None:
            raise EpisodeOverError("reset() must be called before step()")
        if state.episode_status != RUNNING:
            raise EpisodeOverError(f"episode already ended ({state.episode_status})")
        cfg = self.cfg
        dt = cfg.dt if dt is None else dt
        if not dt > 0:
            raise ValueError("dt must be positive")
        if not math.isfinite(ego_accel):
            raise ValueError("ego acceleration must be finite")

        geo = state.geometry
        ego = state.ego
        ego.a = min(max(ego_accel, cfg.accel_min), cfg.accel_max)
        ego_in_zone = geo.in_zone(ego.x)

        traffic = state.traffic
        accels = []
        leader = None
        for veh in traffic:
            accels.append(cooperative_driver_policy(veh, leader, ego, cfg, ego_in_zone))
            leader = veh

        onsets = 0
        for veh, a in zip(traffic, accels):
            veh.a = a
            veh.x, veh.v, _ = advance(veh.x, veh.v, a, dt)
            braking = a < cfg.accel_min
            if braking and not veh.emergency:
                onsets += 1
            veh.emergency = braking
        ego.x, ego.v, zero_time = advance(ego.x, ego.v, ego.a, dt)
        state.stopped_time = state.stopped_time + zero_time if ego.v == 0.0 else 0.0
        state.sim_time += dt

        while state.sim_time >= state.next_spawn_time:
            lag = state.sim_time - state.next_spawn_time
            veh = self._new_vehicle(state, 0.0)
            veh.x = veh.v * lag
            traffic.append(veh)
            state.spawn_times.append(state.next_spawn_time)
            state.next_spawn_time += self._headway()
        state.traffic = [veh for veh in traffic if veh.x <= geo.main_lane_visible_length]

        event = self._detect_event(state)
        if event == EV_MERGED:
            state.episode_status = MERGED
        elif event == EV_COLLISION:
            state.episode_status = COLLIDED
        elif event == EV_STOP:
            state.episode_status = STOPPED
        r = reward(state, event, self.alpha, cfg)
        if event == EV_NONE and onsets:
            event = EV_EMERGENCY
        outcome = StepOutcome(r, state.episode_status != RUNNING, event, onsets)
        if self.record_trace:
            self._record(event)
        return state, outcome

    def _detect_event(self, state: EnvState) -> str:
        cfg = self.cfg
        geo = state.geometry
        ego = state.ego
        if ego.x >= geo.zone_start:
            for veh in state.traffic:
                gap = veh.x - veh.length - ego.x if veh.x >= ego.x else ego.x - ego.length - veh.x
                if gap < 0.0:
                    return EV_COLLISION
        if ego.x >= geo.merge_point:
            return EV_MERGED
        if state.stopped_time >= cfg.stop_duration - 1e-9:
            return EV_STOP
        if state.sim_time >= cfg.max_episode_time - 1e-9:
            return EV_STOP
        return EV_NONE

    # -- trace export ----------------------------------------------------

    def _record(self, event: str) -> None:
        s = self.state
        rows = [(s.sim_time, s.ego.id, s.ego.lane, s.ego.x, s.ego.v, s.ego.a, event)]
        rows += [(s.sim_time, v.id, v.lane, v.x, v.v, v.a, "") for v in s.traffic]
        self.trace.extend(rows)

    def write_trace(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(("sim_time", "vehicle_id", "lane", "position", "speed", "accel", "event"))
            for t, vid, lane, x, v, a, ev in self.trace:
                writer.writerow((f"{t:.4f}", vid, lane, repr(x), repr(v), repr(a), ev))
