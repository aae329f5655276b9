import math

import pytest

from blindac import experiments
from blindac.experiments import ARMS, directional_summary, unit_key


def fake_unit(early=0.0, rv=0.1, incidents=10, err=1.0):
    return {"early_normalized_reward": early, "final_residual_variance": rv,
            "eval_incidents_high_loss": incidents, "final_cumulative_reward_error": err}


def test_directional_summary_flags():
    units = {}
    for s in (0, 1):
        for k in ARMS:
            units[(k, s)] = fake_unit()
    units[("blind", 0)] = fake_unit(early=1.0, rv=0.05, incidents=3, err=0.5)
    # seed 1: blind ties on incidents with one arm, which is not strictly fewer
    units[("blind", 1)] = fake_unit(early=-1.0, rv=math.nan, incidents=10, err=2.0)
    out = directional_summary(units, seeds=(0, 1))
    assert out == {"early_reward": [True, False], "residual_variance": [True, False],
                   "incidents": [True, False], "reward_error": [True, False]}


def test_incidents_must_beat_every_baseline():
    units = {(k, 0): fake_unit(incidents=5) for k in ARMS}
    units[("blind", 0)] = fake_unit(incidents=4)
    assert directional_summary(units, seeds=(0,))["incidents"] == [True]
    units[("motion_model", 0)] = fake_unit(incidents=4)
    assert directional_summary(units, seeds=(0,))["incidents"] == [False]


def test_unit_key_tracks_config_not_outdir():
    a = experiments.base_config().replace(run={"kind": "blind", "seed": 0})
    assert unit_key(a) == unit_key(a.replace(run={"outdir": "/elsewhere"}))
    assert unit_key(a) != unit_key(a.replace(run={"seed": 1}))
    assert unit_key(a) != unit_key(a.replace(agent={"tau": 0.1}))


def test_unit_cache_round_trip(tmp_path, monkeypatch):
    monkeypatch.setenv("BLINDAC_CACHE", str(tmp_path))
    calls = []

    def fake_run(cfg):
        calls.append(cfg.run.seed)
        return {"kind": cfg.run.kind, "seed": cfg.run.seed, "x": math.nan}

    monkeypatch.setattr(experiments, "run_unit", fake_run)
    first = experiments.unit("blind", 3)
    second = experiments.unit("blind", 3)
    assert calls == [3]
    assert first["seed"] == second["seed"] == 3 and math.isnan(second["x"])


@pytest.mark.slow
def test_short_period_beats_long_on_fixed_delay():
    # lossless channel, fixed 100 ms delay: deliveries arrive every tick, so a
    # long virtual period throws most of them away
    scores = experiments.tau_sweep()
    short = [max(a, b) for a, b in zip(scores[0.05], scores[0.1])]
    wins = sum(s > l for s, l in zip(short, scores[0.2]))
    print("tau sweep:", {t: [round(x, 2) for x in v] for t, v in scores.items()})
    assert wins >= 2
