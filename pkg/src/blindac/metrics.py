"""Training diagnostics and reliability-grid test metrics."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .channel import V2XChannel
from .config import ChannelConfig, EnvConfig
from .env import MergeEnv
from .sim import EpisodeResult, run_episode


def residual_variance(v_tar: Sequence[float], v_phi: Sequence[float]) -> float:
    """Var(v_tar - v_phi) / Var(v_tar) with population variances; NaN when Var(v_tar) == 0."""
    v_tar = np.asarray(v_tar, dtype=float)
    v_phi = np.asarray(v_phi, dtype=float)
    if v_tar.shape != v_phi.shape or v_tar.size < 2:
        raise ValueError("need two equal-length arrays with at least 2 entries")
    denom = np.var(v_tar)
    if denom == 0.0:
        return math.nan
    return float(np.var(v_tar - v_phi) / denom)


def normalized_avg_reward(returns: Sequence[float], alpha: float, window: int = 100) -> np.ndarray:
    """Trailing mean of episode returns over ``window`` episodes, divided by ``alpha``.

    The first ``window - 1`` points average whatever episodes exist so far.
    """
    if window < 1:
        raise ValueError("window must be >= 1")
    r = np.asarray(returns, dtype=float)
    if r.size == 0:
        return r
    csum = np.concatenate(([0.0], np.cumsum(r)))
    idx = np.arange(1, r.size + 1)
    lo = np.maximum(idx - window, 0)
    return (csum[idx] - csum[lo]) / (idx - lo) / alpha


def cumulative_reward_error(pairs: Iterable[tuple[float, float]]) -> np.ndarray:
    """Running sum of |approximation - ground truth|."""
    arr = np.asarray(list(pairs), dtype=float).reshape(-1, 2)
    return np.cumsum(np.abs(arr[:, 0] - arr[:, 1]))


def cumulative_value_error(pairs: Iterable[tuple[float, float]]) -> np.ndarray:
    """Running sum of |critic target - ground-truth target|."""
    return cumulative_reward_error(pairs)


@dataclass
class CellReport:
    mu_delay_ms: float
    p_mlr: float
    episodes: int = 0
    collisions: int = 0
    emergency_brakings: int = 0
    avg_safety_distance: float = math.nan
    avg_speed_kmh: float = math.nan
    merge_success_rate: float = 0.0
    mean_return: float = math.nan
    results: list[EpisodeResult] = field(default_factory=list, repr=False)

    def aggregate(self) -> "CellReport":
        res = self.results
        self.episodes = len(res)
        self.collisions = sum(r.collision for r in res)
        self.emergency_brakings = sum(r.emergency_brakings for r in res)
        safety = [r.safety_distance for r in res if r.merged and not math.isnan(r.safety_distance)]
        speeds = [r.zone_speed_kmh for r in res if not math.isnan(r.zone_speed_kmh)]
        self.avg_safety_distance = float(np.mean(safety)) if safety else math.nan
        self.avg_speed_kmh = float(np.mean(speeds)) if speeds else math.nan
        self.merge_success_rate = sum(r.merged for r in res) / len(res) if res else 0.0
        self.mean_return = float(np.mean([r.ret for r in res])) if res else math.nan
        return self

    def row(self) -> dict:
        d = asdict(self)
        d.pop("results")
        return d


REPORT_FIELDS = ("mu_delay_ms", "p_mlr", "episodes", "collisions", "emergency_brakings",
                 "avg_safety_distance", "avg_speed_kmh", "merge_success_rate", "mean_return")


@dataclass
class TestReport:
    cells: list[CellReport]
    label: str = ""

    __test__ = False  # not a pytest class

    @property
    def episodes(self) -> int:
        return sum(c.episodes for c in self.cells)

    def cell(self, mu: float, p: float) -> CellReport:
        for c in self.cells:
            if c.mu_delay_ms == mu and c.p_mlr == p:
                return c
        raise KeyError((mu, p))

    def incidents(self, min_p_mlr: float = 0.0) -> int:
        """Collisions plus emergency brakings over cells with p_mlr >= min_p_mlr."""
        return sum(c.collisions + c.emergency_brakings for c in self.cells if c.p_mlr >= min_p_mlr)

    def totals(self) -> dict:
        res = [r for c in self.cells for r in c.results]
        total = CellReport(math.nan, math.nan, results=res).aggregate().row()
        del total["mu_delay_ms"], total["p_mlr"]
        return total

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(REPORT_FIELDS)
            for c in self.cells:
                row = c.row()
                writer.writerow([_fmt(row[k]) for k in REPORT_FIELDS])

    def to_json(self) -> str:
        blob = {"label": self.label, "cells": [c.row() for c in self.cells], "totals": self.totals()}
        return json.dumps(blob, indent=2, sort_keys=True, default=_json_default) + "\n"

    def write_json(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def from_json(cls, text: str) -> "TestReport":
        blob = json.loads(text)
        cells = [CellReport(**{k: v for k, v in c.items()}) for c in blob["cells"]]
        return cls(cells, blob.get("label", ""))


def _fmt(v) -> str:
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return str(v)


def _json_default(v):
    raise TypeError(type(v))


def _cell_seeds(seed: int, cell: int, episode: int) -> tuple[int, np.random.Generator]:
    env_seed = int(np.random.SeedSequence([seed, 1, cell, episode]).generate_state(1)[0])
    ch_rng = np.random.default_rng(np.random.SeedSequence([seed, 2, cell, episode]))
    return env_seed, ch_rng


def evaluate_grid(
    agent,
    env_cfg: EnvConfig,
    alpha: float,
    grid_mu_ms: Sequence[float],
    grid_p_mlr: Sequence[float],
    episodes_per_cell: int,
    seed: int,
    sigma_ms: float = 23.0,
    label: str = "",
) -> TestReport:
    """Frozen-policy episodes over every (mean delay, loss rate) cell.

    Safety distance is min(d_P1, d_F1) at the merge-completion tick, averaged
    over merged episodes. Speed is the ego's mean speed over its merge-zone
    traversal, in km/h, averaged over episodes.
    """
    if episodes_per_cell < 1:
        raise ValueError("episodes_per_cell must be >= 1")
    if not getattr(agent, "trained", False):
        raise RuntimeError("evaluate_grid needs a trained (or loaded) agent")
    if hasattr(agent, "freeze"):
        agent.freeze()
    env = MergeEnv(env_cfg, alpha)
    cells = []
    ci = 0
    for mu in grid_mu_ms:
        for p in grid_p_mlr:
            ch_cfg = ChannelConfig(mu_delay_ms=mu, sigma_delay_ms=sigma_ms, p_mlr=p)
            cell = CellReport(float(mu), float(p))
            for ep in range(episodes_per_cell):
                env_seed, ch_rng = _cell_seeds(seed, ci, ep)
                channel = V2XChannel(ch_cfg, ch_rng)
                cell.results.append(run_episode(env, channel, agent, env_seed, ep, wait_for_delivery=False))
            cells.append(cell.aggregate())
            ci += 1
    return TestReport(cells, label)
