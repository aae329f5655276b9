"""Command-line entry point: ``blindac <verb> [options]``."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .config import AGENT_KINDS, ConfigError, RunConfig, TuneSpec
from .harness import (TrainingDiverged, TrainingLog, channel_config, derive_seed, emit_report, load_agent,
                      run_grid_eval, run_training, tune)
from .agents import make_agent
from .channel import V2XChannel
from .env import MergeEnv
from .metrics import TestReport
from .sim import run_episode

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED = 0, 2, 3


def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    run = {}
    if getattr(args, "seed", None) is not None:
        run["seed"] = args.seed
    if getattr(args, "kind", None) is not None:
        run["kind"] = args.kind
    if getattr(args, "outdir", None) is not None:
        run["outdir"] = args.outdir
    if getattr(args, "episodes", None) is not None:
        run["episodes"] = args.episodes
    return cfg.replace(run=run).validate()


def cmd_train(args) -> int:
    cfg = _load_config(args)
    _, log = run_training(cfg, cfg.run.outdir)
    n = len(log.episodes)
    merged = sum(e.merged for e in log.episodes)
    print(f"{cfg.run.kind}: {n} episodes, {merged} merged, final normalized reward "
          f"{log.final_normalized_reward():.4f}, outputs in {cfg.run.outdir}")
    return EXIT_OK


def cmd_tune(args) -> int:
    cfg = _load_config(args)
    spec = TuneSpec.from_ini(Path(args.config).read_text()) if args.config else TuneSpec()
    if args.trials is not None:
        spec.trials = args.trials
        spec.validate()
    best, table = tune(spec, cfg, cfg.run.outdir)
    for row in table:
        print(f"trial {row['trial']}: alpha={row['alpha']:.4g} tau={row['tau']:g} "
              f"steps={row['max_train_steps']} -> {row['status']} {row['score']:.4f}")
    print(f"best: alpha={best.agent.alpha:.4g} tau={best.agent.tau:g} steps={best.agent.max_train_steps}")
    return EXIT_OK


def cmd_eval_grid(args) -> int:
    _, cfg = load_agent(args.checkpoint, args.kind)
    per_cell = args.episodes_per_cell or cfg.run.eval_episodes_per_cell
    seed = cfg.run.seed if args.seed is None else args.seed
    outdir = args.outdir or str(Path(args.checkpoint).parent / "eval")
    report = run_grid_eval(args.checkpoint, per_cell, seed, outdir=outdir, kind=args.kind)
    t = report.totals()
    print(f"{report.label}: {t['episodes']} episodes, {t['collisions']} collisions, "
          f"{t['emergency_brakings']} emergency brakings, merge rate {t['merge_success_rate']:.3f}; "
          f"outputs in {outdir}")
    return EXIT_OK


def _pairs(items: Sequence[str], what: str) -> list[tuple[str, str]]:
    out = []
    for item in items:
        label, sep, path = item.partition("=")
        if not sep or not label or not path:
            raise ConfigError(f"{what} must look like LABEL=PATH, got {item!r}")
        out.append((label, path))
    return out


def cmd_report(args) -> int:
    logs = {}
    for label, path in _pairs(args.run, "--run"):
        cfg = RunConfig.load(Path(path) / "config.ini")
        logs[label] = TrainingLog.read(path, cfg.agent.alpha, label)
    reports = {}
    for label, path in _pairs(args.grid, "--grid"):
        reports[label] = TestReport.from_json(Path(path).read_text())
    files = emit_report(logs, reports, args.outdir)
    print(f"wrote {len(files)} files to {args.outdir}")
    return EXIT_OK


def cmd_replay_trace(args) -> int:
    """One episode with full simulator and channel traces."""
    if args.checkpoint:
        agent, cfg = load_agent(args.checkpoint, args.kind)
    else:
        cfg = _load_config(args)
        agent = make_agent(cfg.run.kind, cfg.agent, cfg.env, derive_seed(cfg.run.seed, 0))
        agent.freeze()
    seed = cfg.run.seed if args.seed is None else args.seed
    outdir = Path(args.outdir or cfg.run.outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    env = MergeEnv(cfg.env, cfg.agent.alpha, record_trace=True)
    channel = V2XChannel(channel_config(cfg), np.random.default_rng(np.random.SeedSequence([seed, 2])), record_trace=True)
    res = run_episode(env, channel, agent, derive_seed(seed, 1, args.episode), args.episode, wait_for_delivery=False)
    env.write_trace(outdir / "episode_trace.csv")
    channel.write_trace(outdir / "channel_trace.csv")
    channel.write_stats(outdir / "channel_stats.json")
    print(f"episode {args.episode}: {res.event} after {res.ticks} ticks, return {res.ret:.4f}; traces in {outdir}")
    return EXIT_OK


def cmd_default_config(args) -> int:
    text = RunConfig().to_ini() + TuneSpec().to_ini()
    if args.output:
        Path(args.output).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="blindac", description="Actor-critic on-ramp merging over a lossy V2X channel.")
    sub = p.add_subparsers(dest="verb", required=True)

    def run_opts(sp, episodes: bool = True):
        sp.add_argument("--config", help="INI run config (defaults used when omitted)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--outdir")
        sp.add_argument("--kind", choices=AGENT_KINDS, help="agent kind override")
        if episodes:
            sp.add_argument("--episodes", type=int)

    sp = sub.add_parser("train", help="train one agent")
    run_opts(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("tune", help="random search over alpha, tau and training steps")
    run_opts(sp)
    sp.add_argument("--trials", type=int)
    sp.set_defaults(func=cmd_tune)

    sp = sub.add_parser("eval-grid", help="evaluate a checkpoint over the delay x loss grid")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--episodes-per-cell", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--outdir")
    sp.add_argument("--kind", choices=AGENT_KINDS, help="expected agent kind")
    sp.set_defaults(func=cmd_eval_grid)

    sp = sub.add_parser("report", help="curve CSVs and SVG plots from training runs and grid reports")
    sp.add_argument("--run", action="append", default=[], metavar="LABEL=DIR")
    sp.add_argument("--grid", action="append", default=[], metavar="LABEL=JSON")
    sp.add_argument("--outdir", required=True)
    sp.set_defaults(func=cmd_report)

    sp = sub.add_parser("replay-trace", help="play one episode and write simulator/channel traces")
    run_opts(sp, episodes=False)
    sp.add_argument("--checkpoint")
    sp.add_argument("--episode", type=int, default=0)
    sp.set_defaults(func=cmd_replay_trace)

    sp = sub.add_parser("default-config", help="print the default config")
    sp.add_argument("--output")
    sp.set_defaults(func=cmd_default_config)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDiverged as exc:
        where = f"; last good checkpoint {exc.checkpoint}" if exc.checkpoint else ""
        print(f"diverged: {exc}{where}", file=sys.stderr)
        return EXIT_DIVERGED
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
