"""Actor-critic agents driven by aperiodically delivered samples.

Three agents share one actor/critic substrate and differ only in how they turn
the delivered stream into critic targets:

* :class:`ClassicAgent` trains on every delivery with a one-step TD target
  (used for both the clean and the aperiodic training arms).
* :class:`BlindAgent` gates on the inter-arrival gap, interpolates the unseen
  rewards across the gap on a virtual grid of period ``tau`` and discounts the
  bootstrap by ``gamma ** (delta_t / tau)``.
* :class:`MotionModelAgent` runs on a fixed period and fills channel gaps with
  constant-speed extrapolations of the last delivered state.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Protocol

import numpy as np

from .channel import TimedSample
from .config import AgentConfig, EnvConfig
from .env import STATE_DIM, normalize_state, state_reward
from .nn import MLP, Adam, NonFiniteError, OUNoise, ReplayMemory, Transition, soft_update

# tolerance when taking the integer part of delta_t / tau (0.3 / 0.1 is 2.999...)
RATIO_EPS = 1e-9


class GateViolation(ValueError):
    """delta_t < tau: no training on this gap."""


def gap_steps(delta_t: float, tau: float) -> int:
    return int(math.floor(delta_t / tau + RATIO_EPS))


def linear_approximation(r_prev: float, r_next: float, delta_t: float, tau: float) -> np.ndarray:
    frac = approximation_fractions(delta_t, tau)
    # the grid point that lands on the delivery reproduces r_next exactly
    return np.where(frac >= 1.0, r_next, r_prev + frac * (r_next - r_prev))


Approximator = Callable[[float, float, float, float], np.ndarray]
APPROXIMATORS: dict[int, Approximator] = {1: linear_approximation}


def register_approximator(order: int, fn: Approximator) -> None:
    """Plug in a reward approximation of a given order."""
    if order < 1:
        raise ValueError("order must be >= 1")
    APPROXIMATORS[order] = fn


def approximate_rewards(r_prev: float, r_next: float, delta_t: float, tau: float, order: int = 1) -> np.ndarray:
    """Rewards on the virtual grid ``t_i + tau, ..., t_i + K tau`` with ``K = int(delta_t / tau)``."""
    if not tau > 0:
        raise ValueError("tau must be positive")
    if gap_steps(delta_t, tau) < 1:
        raise GateViolation(f"delta_t={delta_t} < tau={tau}")
    try:
        fn = APPROXIMATORS[order]
    except KeyError:
        raise ValueError(f"no reward approximator registered for order {order}") from None
    return fn(r_prev, r_next, delta_t, tau)


def approximation_fractions(delta_t: float, tau: float) -> np.ndarray:
    """Position of each approximated instant inside the gap, as a fraction of it."""
    k = np.arange(1, gap_steps(delta_t, tau) + 1)
    frac = k * tau / delta_t
    return np.where(frac >= 1.0 - RATIO_EPS, 1.0, frac)


@dataclass(frozen=True)
class TargetBreakdown:
    mc_sum: float
    td_tail: float
    k_count: int

    @property
    def target(self) -> float:
        return self.mc_sum + self.td_tail


def blind_target(r_hat, delta_t: float, tau: float, gamma: float, v_next: float,
                 terminal: bool) -> tuple[float, TargetBreakdown]:
    r_hat = np.asarray(r_hat, dtype=float)
    k = gap_steps(delta_t, tau)
    if k < 1:
        raise GateViolation(f"delta_t={delta_t} < tau={tau}")
    if len(r_hat) != k:
        raise ValueError(f"expected {k} approximated rewards, got {len(r_hat)}")
    mc = float(np.dot(gamma ** np.arange(k), r_hat))
    tail = 0.0 if terminal else gamma ** (delta_t / tau) * v_next
    bd = TargetBreakdown(mc, tail, k)
    return bd.target, bd


def classic_td_target(r: float, gamma: float, v_next: float, terminal: bool) -> float:
    return r if terminal else r + gamma * v_next


def advantage(v_tar, v_phi):
    return v_tar - v_phi


def motion_model_estimate(state: np.ndarray, elapsed: float) -> np.ndarray:
    """Constant-speed extrapolation of a state vector by ``elapsed`` seconds.

    Follower gaps shrink at their relative speed, the ego's distance to the
    merge point shrinks at its speed and preceding gaps (no relative speed in
    the state) are held. Speeds are held.
    """
    if elapsed < 0:
        raise ValueError("elapsed must be >= 0")
    s = np.array(state, dtype=float)
    if elapsed == 0:
        return s
    s[0] -= s[1] * elapsed
    s[3] = max(s[3] - s[4] * elapsed, 0.0)
    s[6] = max(s[6] - s[7] * elapsed, 0.0)
    return s


class GroundTruth(Protocol):
    """Harness-side oracle access used only for diagnostics."""

    def reward_at(self, gen_time: float) -> Optional[float]: ...

    def state_at(self, gen_time: float) -> Optional[np.ndarray]: ...


@dataclass
class Diagnostic:
    episode: int
    clock: float
    delta_t: float
    target: float
    advantage: float
    critic_loss: float
    actor_loss: float


@dataclass
class _Anchor:
    state: np.ndarray
    reward: float
    action: float
    gen_time: float
    arrival: float


@dataclass
class EpisodeStats:
    v_tar: list = field(default_factory=list)
    v_phi: list = field(default_factory=list)
    train_steps: int = 0


class ActorCriticAgent:
    """Shared actor/critic machinery; subclasses implement the receive logic."""

    kind = "base"

    def __init__(self, cfg: AgentConfig, env_cfg: EnvConfig, seed: int = 0):
        cfg.validate()
        self.cfg = cfg
        self.env_cfg = env_cfg
        self.rng = np.random.default_rng(seed)
        h = cfg.hidden
        self.actor = MLP([STATE_DIM, h, h, 1], "tanh", "tanh", self.rng, out_scale=0.1)
        self.critic = MLP([STATE_DIM, h, h, 1], "tanh", "linear", self.rng)
        self.critic_target = self.critic.copy()
        self.actor_opt = Adam(self.actor.n_params, cfg.actor_lr)
        self.critic_opt = Adam(self.critic.n_params, cfg.critic_lr)
        self.memory = ReplayMemory(cfg.replay_capacity, STATE_DIM)
        self.ou = OUNoise(cfg.ou_theta, cfg.ou_sigma)
        self.a_mid = 0.5 * (env_cfg.accel_max + env_cfg.accel_min)
        self.a_half = 0.5 * (env_cfg.accel_max - env_cfg.accel_min)
        self.training = True
        self.explore = True
        self.train_steps = 0
        self.loaded = False
        self.episode = 0
        self.command = 0.0
        self.truth: Optional[GroundTruth] = None
        self.diagnostics: list[Diagnostic] = []
        self.record_diagnostics = True
        self.reward_pairs: list[tuple[float, float]] = []
        self.value_pairs: list[tuple[float, float]] = []
        self.ep = EpisodeStats()
        self._last_action_clock: Optional[float] = None
        self.latest: Optional[TimedSample] = None

    # -- episode lifecycle ---------------------------------------------

    def begin_episode(self, episode: int = 0) -> None:
        self.episode = episode
        self.command = 0.0
        self.ou.reset()
        self.ep = EpisodeStats()
        self._last_action_clock = None
        self.latest = None

    def on_delivery(self, sample: TimedSample, clock: float) -> None:
        raise NotImplementedError

    def on_tick(self, clock: float) -> None:
        """Called once per simulator tick after deliveries; default no-op."""

    @property
    def trained(self) -> bool:
        return self.loaded or self.train_steps > 0

    def freeze(self) -> None:
        self.training = False
        self.explore = False

    # -- acting ----------------------------------------------------------

    def norm(self, s: np.ndarray) -> np.ndarray:
        return normalize_state(s, self.env_cfg)

    def mean_action(self, state: np.ndarray) -> float:
        out = self.actor(self.norm(state))
        return float(self.a_mid + self.a_half * out[0])

    def act(self, state: np.ndarray, explore: Optional[bool] = None, clock: Optional[float] = None) -> float:
        state = np.asarray(state, dtype=float)
        if state.shape != (STATE_DIM,) or not np.all(np.isfinite(state)):
            raise ValueError("state must be a finite 8-vector")
        explore = self.explore if explore is None else explore
        a = self.mean_action(state)
        if explore:
            if clock is None or self._last_action_clock is None:
                dt = self.cfg.agent_period
            else:
                dt = max(clock - self._last_action_clock, 1e-3)
            a += self.ou.step(dt, self.rng)
        if clock is not None:
            self._last_action_clock = clock
        a = min(max(a, self.env_cfg.accel_min), self.env_cfg.accel_max)
        self.command = a
        return a

    # -- learning --------------------------------------------------------

    def can_train(self) -> bool:
        return self.training and not (self.cfg.max_train_steps and self.train_steps >= self.cfg.max_train_steps)

    def store_and_train(self, tr: Transition, clock: float) -> None:
        if not self.can_train():
            return
        self.memory.push(tr)
        if self.cfg.replay:
            if not self.memory.ready(self.cfg.batch_size):
                return
            batch = self.memory.sample(self.cfg.batch_size, self.rng)
            s, a, mc, disc, term, s2 = batch.s, batch.a, batch.mc_sum, batch.discount, batch.terminal, batch.s_next
        else:
            s, a = tr.s[None, :], np.array([tr.a])
            mc, disc = np.array([tr.mc_sum]), np.array([tr.discount])
            term, s2 = np.array([tr.terminal]), tr.s_next[None, :]
        self._update(s, a, mc, disc, term, s2, clock, tr.delta_t)

    def _update(self, s, a, mc, disc, term, s2, clock: float, delta_t: float) -> None:
        n = len(a)
        xs = self.norm(s)
        v_next = self.critic_target(self.norm(s2))[:, 0]
        target = mc + np.where(term, 0.0, disc * v_next)

        v, c_cache = self.critic.forward(xs)
        v = v[:, 0]
        err = v - target
        critic_loss = float(np.mean(err * err))
        adv = advantage(target, v)

        mu, a_cache = self.actor.forward(xs)
        mu = mu[:, 0]
        a_norm = (a - self.a_mid) / self.a_half
        diff = a_norm - mu
        if self.cfg.policy_gradient == "gaussian":
            var = self.cfg.policy_std ** 2
            actor_loss = float(np.mean(adv * diff * diff / (2.0 * var)))
            g_mu = -adv * diff / var / n
        else:
            actor_loss = float(np.mean(adv * diff * diff * 0.5))
            g_mu = -adv * diff / n
        if not (math.isfinite(critic_loss) and math.isfinite(actor_loss)):
            raise NonFiniteError(f"non-finite loss at train step {self.train_steps}")

        self.critic_opt.step(self.critic.flat, self.critic.backward(c_cache, (2.0 * err / n)[:, None]))
        self.actor_opt.step(self.actor.flat, self.actor.backward(a_cache, g_mu[:, None]))
        soft_update(self.critic_target, self.critic, self.cfg.target_coeff)
        self.train_steps += 1
        self.ep.train_steps += 1
        self.ep.v_tar.append(target)
        self.ep.v_phi.append(v)
        if self.record_diagnostics:
            self.diagnostics.append(Diagnostic(
                self.episode, clock, delta_t, float(np.mean(target)), float(np.mean(adv)), critic_loss, actor_loss))

    # -- persistence -----------------------------------------------------

    def networks(self) -> dict[str, MLP]:
        return {"actor": self.actor, "critic": self.critic, "critic_target": self.critic_target}

    def load_networks(self, nets: dict[str, MLP]) -> None:
        self.actor = nets["actor"]
        self.critic = nets["critic"]
        self.critic_target = nets.get("critic_target", self.critic.copy())
        self.loaded = True

    def value(self, state: np.ndarray, target: bool = True) -> float:
        net = self.critic_target if target else self.critic
        return float(net(self.norm(np.asarray(state, dtype=float)))[0])


class ClassicAgent(ActorCriticAgent):
    """One-step TD actor-critic acting and training on every delivery."""

    kind = "classic"

    def __init__(self, cfg: AgentConfig, env_cfg: EnvConfig, seed: int = 0):
        super().__init__(cfg, env_cfg, seed)
        self.anchor: Optional[_Anchor] = None

    def begin_episode(self, episode: int = 0) -> None:
        super().begin_episode(episode)
        self.anchor = None

    def on_delivery(self, sample: TimedSample, clock: float) -> None:
        self.latest = sample
        anc = self.anchor
        if anc is not None:
            tr = Transition(anc.state, anc.action, anc.reward, sample.reward_raw,
                            sample.arrival_time - anc.arrival, sample.state, sample.terminal,
                            mc_sum=sample.reward_raw, discount=self.cfg.gamma)
            self.store_and_train(tr, clock)
        if sample.terminal:
            self.anchor = None
            return
        a = self.act(sample.state, clock=clock)
        self.anchor = _Anchor(sample.state, sample.reward_raw, a, sample.gen_time, sample.arrival_time)


class BlindAgent(ActorCriticAgent):
    """Actor-critic on a virtual sampling period ``tau``.

    A delivery closes the open transition only when its inter-arrival gap is
    at least ``tau``; otherwise it just refreshes ``latest`` and the held
    action stays in force. A terminal delivery closes the transition whenever
    the open one is at least ``tau`` old, so episode outcomes are not skipped.
    """

    kind = "blind"

    def __init__(self, cfg: AgentConfig, env_cfg: EnvConfig, seed: int = 0):
        super().__init__(cfg, env_cfg, seed)
        self.anchor: Optional[_Anchor] = None
        self.skipped = 0

    def begin_episode(self, episode: int = 0) -> None:
        super().begin_episode(episode)
        self.anchor = None

    def on_delivery(self, sample: TimedSample, clock: float) -> None:
        self.latest = sample
        tau = self.cfg.tau
        anc = self.anchor
        if anc is None:
            if not sample.terminal:
                a = self.act(sample.state, clock=clock)
                self.anchor = _Anchor(sample.state, sample.reward_raw, a, sample.gen_time, sample.arrival_time)
            return
        span = sample.arrival_time - anc.arrival
        gate_open = sample.delta_t >= tau or (sample.terminal and gap_steps(span, tau) >= 1)
        if not gate_open:
            self.skipped += 1
            if sample.terminal:
                self.anchor = None
            return

        r_hat = approximate_rewards(anc.reward, sample.reward_raw, span, tau, self.cfg.approx_order)
        gamma = self.cfg.gamma
        mc = float(np.dot(gamma ** np.arange(len(r_hat)), r_hat))
        disc = gamma ** (span / tau)
        if self.truth is not None and self.training and not sample.terminal:
            self._record_errors(anc, sample, span, r_hat, mc)
        tr = Transition(anc.state, anc.action, anc.reward, sample.reward_raw, span, sample.state,
                        sample.terminal, mc_sum=mc, discount=disc)
        self.store_and_train(tr, clock)
        if sample.terminal:
            self.anchor = None
            return
        a = self.act(sample.state, clock=clock)
        self.anchor = _Anchor(sample.state, sample.reward_raw, a, sample.gen_time, sample.arrival_time)

    def _record_errors(self, anc: _Anchor, sample: TimedSample, span: float, r_hat: np.ndarray, mc: float) -> None:
        fr = approximation_fractions(span, self.cfg.tau)
        instants = anc.gen_time + fr * (sample.gen_time - anc.gen_time)
        truth = [self.truth.reward_at(t) for t in instants]
        if any(r is None for r in truth):
            return
        self.reward_pairs.extend(zip(r_hat.tolist(), truth))
        oracle = float(np.dot(self.cfg.gamma ** np.arange(len(truth)), truth))
        self.value_pairs.append((mc, oracle))


class MotionModelAgent(ActorCriticAgent):
    """Fixed-period classic actor-critic; gaps filled by motion-model estimates."""

    kind = "motion_model"

    def __init__(self, cfg: AgentConfig, env_cfg: EnvConfig, seed: int = 0):
        super().__init__(cfg, env_cfg, seed)
        self.prev: Optional[tuple[np.ndarray, float]] = None
        self._fresh = False
        self._next_tick: Optional[float] = None
        self.done = False

    def begin_episode(self, episode: int = 0) -> None:
        super().begin_episode(episode)
        self.prev = None
        self._fresh = False
        self._next_tick = None
        self.done = False

    def on_delivery(self, sample: TimedSample, clock: float) -> None:
        self.latest = sample
        self._fresh = True

    def estimate(self, clock: float) -> tuple[np.ndarray, float, bool, bool]:
        """(state, reward, terminal, is_pseudo) for the agent's current tick."""
        last = self.latest
        if self._fresh:
            return last.state, last.reward_raw, last.terminal, False
        s = motion_model_estimate(last.state, clock - last.arrival_time)
        return s, state_reward(s, self.cfg.alpha, self.env_cfg), False, True

    def on_tick(self, clock: float) -> None:
        if self.latest is None or self.done:
            return
        if self._next_tick is not None and clock < self._next_tick - 1e-9:
            return
        self._next_tick = clock + self.cfg.agent_period
        s, r, terminal, pseudo = self.estimate(clock)
        self._fresh = False
        if self.prev is not None:
            ps, pa = self.prev
            if pseudo and self.truth is not None and self.training:
                self._record_errors(s, r, clock)
            tr = Transition(ps, pa, 0.0, r, self.cfg.agent_period, s, terminal,
                            mc_sum=r, discount=self.cfg.gamma)
            self.store_and_train(tr, clock)
        if terminal:
            self.done = True
            self.prev = None
            return
        a = self.act(s, clock=clock)
        self.prev = (s, a)

    def _record_errors(self, s_est: np.ndarray, r_est: float, clock: float) -> None:
        last = self.latest
        instant = last.gen_time + (clock - last.arrival_time)
        r_true = self.truth.reward_at(instant)
        s_true = self.truth.state_at(instant)
        if r_true is None or s_true is None:
            return
        self.reward_pairs.append((r_est, r_true))
        g = self.cfg.gamma
        est = r_est + g * self.value(s_est)
        oracle = r_true + g * self.value(s_true)
        self.value_pairs.append((est, oracle))


def make_agent(kind: str, cfg: AgentConfig, env_cfg: EnvConfig, seed: int = 0) -> ActorCriticAgent:
    if kind in ("classic_clean", "classic_aperiodic", "classic"):
        agent = ClassicAgent(cfg, env_cfg, seed)
    elif kind == "blind":
        agent = BlindAgent(cfg, env_cfg, seed)
    elif kind == "motion_model":
        agent = MotionModelAgent(cfg, env_cfg, seed)
    else:
        raise ValueError(f"unknown agent kind {kind!r}")
    agent.kind = kind
    return agent
