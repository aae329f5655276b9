"""V2X delay/loss channel between the simulator and the agent.

The transmitter side gates message generation (optional CPM-style rules), each
message draws an i.i.d. Bernoulli loss and a Normal transit delay (non-positive
draws rejected), and the receiver polls the in-flight set with its clock.
Messages overtaken by a fresher one are dropped as stale on arrival.
"""

from __future__ import annotations

import csv
import heapq
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Optional

import numpy as np

from .config import ChannelConfig

MIN_GEN_INTERVAL = 0.1
MAX_GEN_INTERVAL = 1.0
POSITION_THRESHOLD = 4.0
SPEED_THRESHOLD = 0.5
HEADING_THRESHOLD_DEG = 4.0


@dataclass
class TimedSample:
    state: np.ndarray
    reward_raw: float
    gen_time: float
    arrival_time: float
    lost: bool = False
    terminal: bool = False
    delta_t: float = math.nan
    stale: bool = False
    tick: int = -1


def sample_delay(rng: np.random.Generator, cfg: ChannelConfig) -> float:
    """Transit delay in seconds, Normal(mu, sigma) with non-positive draws redrawn."""
    mu = cfg.mu_delay_ms / 1000.0
    sigma = cfg.sigma_delay_ms / 1000.0
    if sigma == 0.0:
        return mu
    while True:
        d = rng.normal(mu, sigma)
        if d > 0.0:
            return d


def transmit(
    state: np.ndarray,
    reward_raw: float,
    gen_time: float,
    rng: np.random.Generator,
    cfg: ChannelConfig,
    terminal: bool = False,
    reliable: bool = False,
    tick: int = -1,
) -> TimedSample:
    """Push one sample through the channel.

    The loss draw happens before the delay draw and both always consume the
    generator, so loss and delay stay independent of each other. ``reliable``
    samples ignore the loss outcome.
    """
    if gen_time < 0:
        raise ValueError("gen_time must be >= 0")
    if cfg.bypass:
        return TimedSample(state, reward_raw, gen_time, gen_time, False, terminal, tick=tick)
    lost = bool(rng.random() < cfg.p_mlr) and not reliable
    delay = sample_delay(rng, cfg)
    return TimedSample(state, reward_raw, gen_time, gen_time + delay, lost, terminal, tick=tick)


Snapshot = dict[Any, tuple[float, float, float]]


def generation_gate(prev_sent: Optional[Snapshot], current: Snapshot, elapsed: float) -> bool:
    """CPM-style generation rule over per-object (position, speed, heading_deg)."""
    if prev_sent is None:
        return True
    if elapsed < MIN_GEN_INTERVAL:
        return False
    if elapsed >= MAX_GEN_INTERVAL:
        return True
    for obj, (pos, speed, heading) in current.items():
        old = prev_sent.get(obj)
        if old is None:
            return True
        if abs(pos - old[0]) > POSITION_THRESHOLD:
            return True
        if abs(speed - old[1]) > SPEED_THRESHOLD:
            return True
        dh = abs((heading - old[2] + 180.0) % 360.0 - 180.0)
        if dh > HEADING_THRESHOLD_DEG:
            return True
    return False


@dataclass
class ChannelStats:
    sent: int = 0
    lost: int = 0
    stale: int = 0
    delivered: int = 0
    gated: int = 0
    delay_sum: float = 0.0
    delay_count: int = 0

    def summary(self) -> dict[str, float]:
        return {
            "sent": self.sent,
            "gated": self.gated,
            "lost": self.lost,
            "stale": self.stale,
            "delivered": self.delivered,
            "loss_rate": self.lost / self.sent if self.sent else math.nan,
            "stale_rate": self.stale / self.sent if self.sent else math.nan,
            "mean_delay_s": self.delay_sum / self.delay_count if self.delay_count else math.nan,
        }


class V2XChannel:
    """Stateful single-writer / single-reader channel instance."""

    def __init__(self, cfg: ChannelConfig, rng: Optional[np.random.Generator] = None, record_trace: bool = False):
        cfg.validate()
        self.cfg = cfg
        self.rng = rng if rng is not None else np.random.default_rng(cfg.seed)
        self.record_trace = record_trace
        self.stats = ChannelStats()
        self.trace: list[TimedSample] = []
        self.reset()

    def reset(self, clock: float = 0.0) -> None:
        self._inflight: list[tuple[float, float, int, TimedSample]] = []
        self._seq = 0
        self._last_gen = -math.inf
        self._last_delivery = clock
        self._last_snapshot: Optional[Snapshot] = None
        self._last_sent_time = -math.inf

    def send(
        self,
        state: np.ndarray,
        reward_raw: float,
        gen_time: float,
        terminal: bool = False,
        snapshot: Optional[Snapshot] = None,
        reliable: bool = False,
        tick: int = -1,
    ) -> Optional[TimedSample]:
        """Offer a ground-truth sample; returns the in-flight record or None if gated."""
        if self.cfg.generation_rules and not terminal and snapshot is not None:
            if not generation_gate(self._last_snapshot, snapshot, gen_time - self._last_sent_time):
                self.stats.gated += 1
                return None
        if snapshot is not None:
            self._last_snapshot = snapshot
        self._last_sent_time = gen_time
        sample = transmit(state, reward_raw, gen_time, self.rng, self.cfg, terminal, reliable, tick)
        self.stats.sent += 1
        if self.record_trace:
            self.trace.append(sample)
        if sample.lost:
            self.stats.lost += 1
            return sample
        self.stats.delay_sum += sample.arrival_time - sample.gen_time
        self.stats.delay_count += 1
        heapq.heappush(self._inflight, (sample.arrival_time, sample.gen_time, self._seq, sample))
        self._seq += 1
        return sample

    def poll(self, clock: float) -> list[TimedSample]:
        """All samples arrived by ``clock`` in arrival order, stale ones removed."""
        out = []
        inflight = self._inflight
        while inflight and inflight[0][0] <= clock:
            _, _, _, sample = heapq.heappop(inflight)
            if sample.gen_time <= self._last_gen:
                sample.stale = True
                self.stats.stale += 1
                continue
            sample.delta_t = sample.arrival_time - self._last_delivery
            self._last_delivery = sample.arrival_time
            self._last_gen = sample.gen_time
            self.stats.delivered += 1
            out.append(sample)
        return out

    @property
    def in_flight(self) -> int:
        return len(self._inflight)

    def write_trace(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(("gen_time", "arrival_time_or_LOST", "delay", "stale_dropped_flag"))
            for s in self.trace:
                if s.lost:
                    writer.writerow((repr(s.gen_time), "LOST", "", 0))
                else:
                    writer.writerow((repr(s.gen_time), repr(s.arrival_time), repr(s.arrival_time - s.gen_time), int(s.stale)))

    def write_stats(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.stats.summary(), indent=2, sort_keys=True) + "\n")
