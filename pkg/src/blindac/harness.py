"""Training runs, hyperparameter search, grid evaluation and report files."""

from __future__ import annotations

import csv
import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import svg
from .agents import ActorCriticAgent, Diagnostic, make_agent
from .channel import V2XChannel
from .config import ConfigError, RunConfig, TuneSpec
from .env import MergeEnv
from .metrics import (TestReport, cumulative_reward_error, cumulative_value_error, evaluate_grid,
                      normalized_avg_reward, residual_variance)
from .nn import MLP, NonFiniteError, load_checkpoint, save_checkpoint
from .sim import EpisodeResult, run_episode

LOG_FIELDS = ("episode", "return", "event", "ticks", "train_steps", "emergency_brakings", "residual_variance")
DIAG_FIELDS = ("episode", "clock", "delta_t", "target", "advantage", "critic_loss", "actor_loss")
CURVES = ("normalized_reward", "residual_variance", "cumulative_reward_error", "cumulative_value_error")
HEATMAP_METRICS = ("collisions", "emergency_brakings", "avg_safety_distance", "avg_speed_kmh", "merge_success_rate")


class TrainingDiverged(RuntimeError):
    """Non-finite loss; ``log`` and ``checkpoint`` describe the last good state."""

    def __init__(self, message: str, log: "TrainingLog", checkpoint: Optional[Path]):
        super().__init__(message)
        self.log = log
        self.checkpoint = checkpoint


class TuneError(RuntimeError):
    def __init__(self, message: str, table: list[dict]):
        super().__init__(message)
        self.table = table


@dataclass
class TrainingLog:
    alpha: float
    label: str = ""
    episodes: list[EpisodeResult] = field(default_factory=list)
    residual_variance: list[float] = field(default_factory=list)
    reward_pairs: list[tuple[float, float]] = field(default_factory=list)
    value_pairs: list[tuple[float, float]] = field(default_factory=list)
    diagnostics: list[Diagnostic] = field(default_factory=list)

    @property
    def returns(self) -> np.ndarray:
        return np.array([e.ret for e in self.episodes], dtype=float)

    def normalized_reward(self, window: int = 100) -> np.ndarray:
        return normalized_avg_reward(self.returns, self.alpha, window)

    def early_normalized_reward(self, frac: float = 0.2) -> float:
        """Mean of per-episode return / alpha over the first ``frac`` of episodes."""
        n = max(1, int(round(len(self.episodes) * frac)))
        return float(np.mean(self.returns[:n]) / self.alpha)

    def final_normalized_reward(self, frac: float = 0.1) -> float:
        n = max(1, int(round(len(self.episodes) * frac)))
        return float(np.mean(self.returns[-n:]) / self.alpha)

    def final_residual_variance(self, frac: float = 0.1) -> float:
        n = max(1, int(round(len(self.residual_variance) * frac)))
        tail = np.asarray(self.residual_variance[-n:], dtype=float)
        tail = tail[np.isfinite(tail)]
        return float(tail.mean()) if tail.size else math.nan

    def curve(self, name: str) -> np.ndarray:
        if name == "normalized_reward":
            return self.normalized_reward()
        if name == "residual_variance":
            return np.asarray(self.residual_variance, dtype=float)
        if name == "cumulative_reward_error":
            return cumulative_reward_error(self.reward_pairs)
        if name == "cumulative_value_error":
            return cumulative_value_error(self.value_pairs)
        raise KeyError(name)

    def write(self, outdir: Path) -> list[Path]:
        outdir.mkdir(parents=True, exist_ok=True)
        paths = [outdir / "training_log.csv", outdir / "diagnostics.csv",
                 outdir / "reward_errors.csv", outdir / "value_errors.csv"]
        with open(paths[0], "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(LOG_FIELDS)
            for e, rv in zip(self.episodes, self.residual_variance):
                w.writerow((e.episode, repr(e.ret), e.event, e.ticks, e.train_steps, e.emergency_brakings, repr(rv)))
        with open(paths[1], "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(DIAG_FIELDS)
            for d in self.diagnostics:
                w.writerow((d.episode, repr(d.clock), repr(d.delta_t), repr(d.target), repr(d.advantage),
                            repr(d.critic_loss), repr(d.actor_loss)))
        for path, pairs in ((paths[2], self.reward_pairs), (paths[3], self.value_pairs)):
            with open(path, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(("index", "estimate", "truth"))
                for i, (a, b) in enumerate(pairs):
                    w.writerow((i, repr(a), repr(b)))
        return paths

    @classmethod
    def read(cls, outdir: str | Path, alpha: float, label: str = "") -> "TrainingLog":
        """Rebuild the curve inputs from files written by :meth:`write`."""
        outdir = Path(outdir)
        log = cls(alpha, label)
        with open(outdir / "training_log.csv", newline="") as fh:
            for row in csv.DictReader(fh):
                log.episodes.append(EpisodeResult(
                    int(row["episode"]), float(row["return"]), row["event"], int(row["ticks"]),
                    row["event"] == "collision", row["event"] == "merged", int(row["emergency_brakings"]),
                    math.nan, math.nan, int(row["train_steps"])))
                log.residual_variance.append(float(row["residual_variance"]))
        for name, target in (("reward_errors.csv", log.reward_pairs), ("value_errors.csv", log.value_pairs)):
            path = outdir / name
            if path.exists():
                with open(path, newline="") as fh:
                    target.extend((float(r["estimate"]), float(r["truth"])) for r in csv.DictReader(fh))
        return log


def derive_seed(seed: int, *path: int) -> int:
    return int(np.random.SeedSequence([seed, *path]).generate_state(1)[0])


def channel_config(cfg: RunConfig):
    """The classic_clean arm sees the simulator directly (constant sampling period)."""
    if cfg.run.kind == "classic_clean":
        return dataclasses.replace(cfg.channel, bypass=True)
    return cfg.channel


def _episode_residual_variance(agent: ActorCriticAgent) -> float:
    if not agent.ep.v_tar:
        return math.nan
    v_tar = np.concatenate(agent.ep.v_tar)
    v_phi = np.concatenate(agent.ep.v_phi)
    if v_tar.size < 2:
        return math.nan
    return residual_variance(v_tar, v_phi)


def _snapshot(agent: ActorCriticAgent) -> dict[str, MLP]:
    return {k: v.copy() for k, v in agent.networks().items()}


def portable(cfg: RunConfig) -> RunConfig:
    """Config as persisted next to outputs: the output directory is dropped so
    identical runs written to different places produce identical files."""
    return cfg.replace(run={"outdir": ""})


def checkpoint_meta(cfg: RunConfig, agent: ActorCriticAgent, episodes: int) -> dict:
    return {"kind": cfg.run.kind, "episodes": episodes, "train_steps": agent.train_steps,
            "config": portable(cfg).to_ini()}


def run_training(
    cfg: RunConfig,
    outdir: Optional[str | Path] = None,
    record_diagnostics: bool = True,
    progress: Optional[Callable[[EpisodeResult], None]] = None,
) -> tuple[ActorCriticAgent, TrainingLog]:
    """Train one agent for ``cfg.run.episodes`` episodes.

    Seeds for the agent, every episode's traffic and the channel are derived
    from ``cfg.run.seed`` alone. With ``outdir`` the checkpoint, config and
    logs are written there. On a non-finite loss the networks from the end of
    the last completed episode are saved and :class:`TrainingDiverged` raised.
    """
    cfg.validate()
    seed = cfg.run.seed
    env = MergeEnv(cfg.env, cfg.agent.alpha)
    channel = V2XChannel(channel_config(cfg), np.random.default_rng(np.random.SeedSequence([seed, 2])))
    agent = make_agent(cfg.run.kind, cfg.agent, cfg.env, derive_seed(seed, 0))
    agent.record_diagnostics = record_diagnostics
    log = TrainingLog(cfg.agent.alpha, cfg.run.kind)
    out = Path(outdir) if outdir is not None else None
    last_good = _snapshot(agent)

    for ep in range(cfg.run.episodes):
        try:
            res = run_episode(env, channel, agent, derive_seed(seed, 1, ep), ep)
        except NonFiniteError as exc:
            ckpt = None
            if out is not None:
                out.mkdir(parents=True, exist_ok=True)
                ckpt = out / "checkpoint.json"
                save_checkpoint(ckpt, last_good, checkpoint_meta(cfg, agent, ep) | {"diverged": True})
                _finish(log, agent, out, cfg, channel)
            raise TrainingDiverged(f"training diverged in episode {ep}: {exc}", log, ckpt) from exc
        log.episodes.append(res)
        log.residual_variance.append(_episode_residual_variance(agent))
        last_good = _snapshot(agent)
        if progress is not None:
            progress(res)

    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(out / "checkpoint.json", agent.networks(), checkpoint_meta(cfg, agent, cfg.run.episodes))
    _finish(log, agent, out, cfg, channel)
    return agent, log


def _finish(log: TrainingLog, agent: ActorCriticAgent, out: Optional[Path], cfg: RunConfig, channel: V2XChannel) -> None:
    log.reward_pairs = list(agent.reward_pairs)
    log.value_pairs = list(agent.value_pairs)
    log.diagnostics = list(agent.diagnostics)
    if out is not None:
        portable(cfg).save(out / "config.ini")
        log.write(out)
        channel.write_stats(out / "channel_stats.json")


def load_agent(checkpoint: str | Path, kind: Optional[str] = None) -> tuple[ActorCriticAgent, RunConfig]:
    """Rebuild a frozen agent from a checkpoint; ``kind`` guards against arm mix-ups."""
    nets, meta = load_checkpoint(checkpoint)
    if "config" not in meta:
        raise ConfigError(f"{checkpoint} has no embedded config")
    cfg = RunConfig.from_ini(meta["config"])
    if kind is not None and meta.get("kind") != kind:
        raise ConfigError(f"checkpoint holds a {meta.get('kind')!r} agent, expected {kind!r}")
    agent = make_agent(meta["kind"], cfg.agent, cfg.env)
    agent.load_networks(nets)
    agent.freeze()
    return agent, cfg


# -- tuning ----------------------------------------------------------------


def _steps_key(steps: int) -> float:
    return math.inf if steps == 0 else float(steps)


def select_best(table: Sequence[dict]) -> dict:
    """Highest score wins; equal scores go to the smaller training-step budget (0 = unlimited)."""
    ok = [row for row in table if row["status"] == "ok" and math.isfinite(row["score"])]
    if not ok:
        raise TuneError("all tuning trials diverged", list(table))
    return min(ok, key=lambda r: (-r["score"], _steps_key(r["max_train_steps"]), r["trial"]))


def sample_trials(spec: TuneSpec) -> list[dict]:
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 7]))
    lo, hi = spec.alpha_range
    trials = []
    for i in range(spec.trials):
        alpha = float(np.exp(rng.uniform(np.log(lo), np.log(hi)))) if hi > lo else float(lo)
        tau = float(spec.tau_choices[rng.integers(len(spec.tau_choices))])
        steps = int(spec.steps_choices[rng.integers(len(spec.steps_choices))])
        trials.append({"trial": i, "alpha": alpha, "tau": tau, "max_train_steps": steps,
                       "seed": derive_seed(spec.seed, 3, i)})
    return trials


TRIAL_FIELDS = ("trial", "alpha", "tau", "max_train_steps", "seed", "status", "score")


def tune(spec: TuneSpec, base: RunConfig, outdir: Optional[str | Path] = None,
         trainer: Callable[[RunConfig], TrainingLog] | None = None) -> tuple[RunConfig, list[dict]]:
    """Random search over (alpha, tau, training-step budget).

    Each trial trains from a fresh seed and is scored by its final-window
    normalized reward. ``trainer`` may replace the training call (tests).
    """
    spec.validate()
    base.validate()
    if trainer is None:
        def trainer(c: RunConfig) -> TrainingLog:
            return run_training(c, record_diagnostics=False)[1]
    table = []
    for t in sample_trials(spec):
        cfg = base.replace(agent={"alpha": t["alpha"], "tau": t["tau"], "max_train_steps": t["max_train_steps"]},
                           run={"seed": t["seed"]})
        row = dict(t)
        try:
            log = trainer(cfg)
            row["status"], row["score"] = "ok", log.final_normalized_reward(spec.final_window_frac)
        except TrainingDiverged:
            row["status"], row["score"] = "diverged", math.nan
        table.append(row)
    if outdir is not None:
        out = Path(outdir)
        out.mkdir(parents=True, exist_ok=True)
        write_trial_table(out / "trials.csv", table)
    best = select_best(table)
    chosen = base.replace(agent={"alpha": best["alpha"], "tau": best["tau"], "max_train_steps": best["max_train_steps"]})
    if outdir is not None:
        chosen.save(Path(outdir) / "best.ini")
    return chosen, table


def write_trial_table(path: Path, table: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRIAL_FIELDS)
        for row in table:
            w.writerow([repr(row[k]) if isinstance(row[k], float) else row[k] for k in TRIAL_FIELDS])


# -- grid evaluation & reports ------------------------------------------------


def run_grid_eval(
    checkpoint: str | Path,
    episodes_per_cell: int,
    seed: int,
    grid_mu_ms: Optional[Sequence[float]] = None,
    grid_p_mlr: Optional[Sequence[float]] = None,
    outdir: Optional[str | Path] = None,
    kind: Optional[str] = None,
) -> TestReport:
    agent, cfg = load_agent(checkpoint, kind)
    mu = tuple(grid_mu_ms) if grid_mu_ms is not None else cfg.run.grid_mu_ms
    p = tuple(grid_p_mlr) if grid_p_mlr is not None else cfg.run.grid_p_mlr
    report = evaluate_grid(agent, cfg.env, cfg.agent.alpha, mu, p, episodes_per_cell, seed,
                           sigma_ms=cfg.run.grid_sigma_ms, label=cfg.run.kind)
    if outdir is not None:
        write_grid_report(report, Path(outdir), "grid")
    return report


def write_grid_report(report: TestReport, outdir: Path, stem: str) -> list[Path]:
    outdir.mkdir(parents=True, exist_ok=True)
    paths = [outdir / f"{stem}_report.csv", outdir / f"{stem}_report.json"]
    report.write_csv(paths[0])
    report.write_json(paths[1])
    mus = sorted({c.mu_delay_ms for c in report.cells})
    ps = sorted({c.p_mlr for c in report.cells})
    for metric in HEATMAP_METRICS:
        values = [[float(getattr(report.cell(m, q), metric)) for q in ps] for m in mus]
        path = outdir / f"{stem}_{metric}.svg"
        svg.write(path, svg.heatmap(values, [f"{m:g} ms" for m in mus], [f"{q:g}" for q in ps],
                                    f"{report.label} {metric}".strip(), "mean delay", "message loss rate"))
        paths.append(path)
    return paths


def emit_report(logs: dict[str, TrainingLog], reports: dict[str, TestReport], outdir: str | Path) -> list[Path]:
    """One CSV per training curve (a column per label) plus overlay SVGs and grid files.

    Labels are written in sorted order so the file set and contents depend
    only on the inputs.
    """
    out = Path(outdir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create report directory {out}: {exc}") from exc
    labels = sorted(logs)
    written = []
    for name in CURVES:
        curves = {lab: logs[lab].curve(name) for lab in labels}
        length = max((len(c) for c in curves.values()), default=0)
        path = out / f"{name}.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(("index", *labels))
            for i in range(length):
                w.writerow((i, *(repr(float(curves[lab][i])) if i < len(curves[lab]) else "" for lab in labels)))
        written.append(path)
        if length:
            # arms without this signal keep a legend entry so every chart lists all labels
            series = {(lab if len(c) else f"{lab} (no data)"): (np.arange(len(c), dtype=float), c)
                      for lab, c in curves.items()}
            xlabel = "episode" if name in ("normalized_reward", "residual_variance") else "approximated sample"
            spath = out / f"{name}.svg"
            svg.write(spath, svg.line_chart(series, name.replace("_", " "), xlabel, name.replace("_", " ")))
            written.append(spath)
    for lab in sorted(reports):
        written.extend(write_grid_report(reports[lab], out, f"grid_{lab}"))
    return written
