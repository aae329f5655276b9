"""Episode loop wiring simulator -> channel -> agent -> simulator."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .channel import V2XChannel
from .env import EV_COLLISION, EV_MERGED, MergeEnv, RUNNING


class TickTruth:
    """Ground-truth tick stream of one episode, indexed by generation time."""

    def __init__(self, dt: float):
        self.dt = dt
        self.rewards: list[float] = []
        self.states: list[np.ndarray] = []
        self.terminal_tick: Optional[int] = None

    def add(self, state: np.ndarray, reward: float, terminal: bool = False) -> None:
        self.states.append(state)
        self.rewards.append(reward)
        if terminal:
            self.terminal_tick = len(self.rewards) - 1

    def _index(self, gen_time: float) -> Optional[int]:
        i = int(round(gen_time / self.dt))
        i = min(max(i, 0), len(self.rewards) - 1)
        if self.terminal_tick is not None and i >= self.terminal_tick:
            return None
        return i

    def reward_at(self, gen_time: float) -> Optional[float]:
        i = self._index(gen_time)
        return None if i is None else self.rewards[i]

    def state_at(self, gen_time: float) -> Optional[np.ndarray]:
        i = self._index(gen_time)
        return None if i is None else self.states[i]


@dataclass
class EpisodeResult:
    episode: int
    ret: float
    event: str
    ticks: int
    collision: bool
    merged: bool
    emergency_brakings: int
    safety_distance: float
    zone_speed_kmh: float
    train_steps: int


def run_episode(
    env: MergeEnv,
    channel: V2XChannel,
    agent,
    env_seed: int,
    episode: int = 0,
    wait_for_delivery: Optional[bool] = None,
    drain_limit: float = 5.0,
) -> EpisodeResult:
    """Play one episode.

    The simulator ticks at ``env.cfg.dt``; every tick's ground truth is
    offered to the channel, the receiver is polled at the same clock and the
    agent's held command drives the next tick. When ``wait_for_delivery`` is
    true (the default while training) the clock keeps running after the
    episode ends until the terminal sample reaches the agent.
    """
    cfg = env.cfg
    dt = cfg.dt
    if wait_for_delivery is None:
        wait_for_delivery = agent.training
    env.reset(env_seed)
    channel.reset(0.0)
    agent.begin_episode(episode)
    truth = TickTruth(dt)
    agent.truth = truth
    steps_before = agent.train_steps

    s = env.observe()
    truth.add(s, 0.0)
    channel.send(s, 0.0, 0.0, tick=0)

    tick = 0
    clock = 0.0
    ret = 0.0
    emergencies = 0
    zone_speeds: list[float] = []
    safety = math.nan
    event = "none"
    end_tick: Optional[int] = None
    drain_ticks = int(round(drain_limit / dt))

    while True:
        terminal_seen = False
        for sample in channel.poll(clock):
            agent.on_delivery(sample, clock)
            terminal_seen |= sample.terminal
        agent.on_tick(clock)
        if end_tick is not None:
            if terminal_seen or not wait_for_delivery or tick - end_tick >= drain_ticks:
                break
        if env.state.episode_status == RUNNING:
            state, out = env.step(agent.command)
            tick += 1
            clock = tick * dt
            s = env.observe()
            truth.add(s, out.reward_raw, out.terminal)
            ret += out.reward_raw
            emergencies += out.emergency_onsets
            ego = state.ego
            if state.geometry.in_zone(ego.x) or out.event in (EV_MERGED, EV_COLLISION):
                zone_speeds.append(ego.v)
            if out.terminal:
                event = out.event
                end_tick = tick
                if out.event == EV_MERGED:
                    safety = float(min(s[2], s[3]))
            channel.send(s, out.reward_raw, clock, terminal=out.terminal, reliable=out.terminal, tick=tick)
        else:
            tick += 1
            clock = tick * dt

    return EpisodeResult(
        episode=episode,
        ret=ret,
        event=event,
        ticks=end_tick if end_tick is not None else tick,
        collision=event == EV_COLLISION,
        merged=event == EV_MERGED,
        emergency_brakings=emergencies,
        safety_distance=safety,
        zone_speed_kmh=float(np.mean(zone_speeds)) * 3.6 if zone_speeds else math.nan,
        train_steps=agent.train_steps - steps_before,
    )
