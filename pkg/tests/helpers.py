"""Synthetic episodes shared by several test modules."""

import math

import numpy as np

from blindac.agents import BlindAgent, MotionModelAgent
from blindac.channel import TimedSample
from blindac.config import AgentConfig, EnvConfig
from blindac.env import state_reward

ENV = EnvConfig()
ALPHA = 0.1
FAR = ENV.sentinel_gap


def linear_reward_state(t: float) -> np.ndarray:
    """In-zone state whose shaping reward is exactly -ALPHA * (0.5 + 0.1 t).

    The follower is absent (sentinel gap, exp(-4) term) and the preceding
    gap is chosen so exp(-d_P1 / 100) = exp(-4) + 0.5 + 0.1 t. The ego keeps
    a constant 20 m/s, so the extrapolated d_CAV is exact while d_P1 (held by
    the motion model) drifts.
    """
    e_p = math.exp(-FAR / 100.0) + 0.5 + 0.1 * t
    return np.array([90.0 - 20.0 * t, 20.0, -100.0 * math.log(e_p), FAR, 0.0, FAR, FAR, 0.0])


class LinearTruth:
    """Continuous-time ground truth for :func:`linear_reward_state`."""

    def reward_at(self, t):
        return state_reward(linear_reward_state(t), ALPHA, ENV)

    def state_at(self, t):
        return linear_reward_state(t)


def delivery_stream(seed: int, duration: float = 3.0, dt: float = 0.05, p_loss: float = 0.6):
    """Ticks every ``dt``; each survives with prob 1 - p_loss and arrives after a
    random delay. Arrivals are kept in generation order (overtaken ones dropped)."""
    rng = np.random.default_rng(seed)
    out = []
    last_arrival = 0.0
    for i in range(int(round(duration / dt)) + 1):
        gen = i * dt
        if i and rng.random() < p_loss:
            continue
        arrival = gen + rng.uniform(0.005, 0.09)
        if arrival <= last_arrival:
            continue
        s = linear_reward_state(gen)
        out.append(TimedSample(s, state_reward(s, ALPHA, ENV), gen, arrival,
                               delta_t=arrival - last_arrival, tick=i))
        last_arrival = arrival
    return out


def agent_cfg(**kw) -> AgentConfig:
    base = dict(alpha=ALPHA, tau=0.1)
    base.update(kw)
    return AgentConfig(**base)


def run_blind(stream, seed: int = 0, **kw) -> BlindAgent:
    agent = BlindAgent(agent_cfg(**kw), ENV, seed)
    agent.begin_episode(0)
    agent.truth = LinearTruth()
    for s in stream:
        agent.on_delivery(s, s.arrival_time)
    return agent


def run_motion_model(stream, seed: int = 0, dt: float = 0.05, **kw) -> MotionModelAgent:
    agent = MotionModelAgent(agent_cfg(**kw), ENV, seed)
    agent.begin_episode(0)
    agent.truth = LinearTruth()
    pending = list(stream)
    end = pending[-1].arrival_time + 0.5
    tick = 0
    while tick * dt <= end:
        clock = tick * dt
        while pending and pending[0].arrival_time <= clock:
            agent.on_delivery(pending.pop(0), clock)
        agent.on_tick(clock)
        tick += 1
    return agent
