import csv
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from blindac.config import ConfigError, EnvConfig
from blindac.env import (EV_COLLISION, EV_MERGED, EV_NONE, EV_STOP, MAIN, RAMP, RUNNING, EnvState,
                         EpisodeOverError, MergeEnv, RampGeometry, Vehicle, advance,
                         cooperative_driver_policy, idm_acceleration, observe, reward, shaping_reward)

CFG = EnvConfig()
GEO = RampGeometry.from_config(CFG)


def make_state(ego_x, ego_v, traffic=()):
    ego = Vehicle(0, RAMP, ego_x, ego_v)
    vehicles = sorted((Vehicle(i + 1, MAIN, x, v) for i, (x, v) in enumerate(traffic)), key=lambda v: -v.x)
    return EnvState(0.0, ego, vehicles, GEO)


def empty_env(ego_x=None, ego_v=None):
    env = MergeEnv(CFG)
    env.reset(0, populate=False)
    env.state.next_spawn_time = math.inf
    if ego_x is not None:
        env.state.ego.x = ego_x
    if ego_v is not None:
        env.state.ego.v = ego_v
    return env


# -- reset ---------------------------------------------------------------------


def test_reset_is_deterministic():
    a, b = MergeEnv(CFG), MergeEnv(CFG)
    sa, sb = a.reset(7), b.reset(7)
    assert sa == sb
    for _ in range(50):
        a.step(0.5)
        b.step(0.5)
    assert a.state == b.state


def test_reset_places_ego_at_ramp_start():
    s = MergeEnv(CFG).reset(3)
    assert s.ego.lane == RAMP
    assert s.ego.x == GEO.ramp_start
    assert s.ego.v == CFG.ego_init_speed
    assert s.episode_status == RUNNING
    assert len(s.traffic) >= 3
    xs = [v.x for v in s.traffic]
    assert xs == sorted(xs, reverse=True)
    assert all(CFG.spawn_speed_min <= v.v <= CFG.spawn_speed_max for v in s.traffic)
    assert all(CFG.c_min <= v.cooperation <= 1.0 for v in s.traffic)


def test_spawn_headways_match_flow():
    env = MergeEnv(CFG)
    env.reset(1, populate=False)
    env.state.ego.v = 0.0
    env.cfg = EnvConfig(stop_duration=1e9, max_episode_time=1e9)
    while len(env.state.spawn_times) < 1001:
        env.step(0.0)
    gaps = np.diff(env.state.spawn_times)
    assert 3.15 <= gaps.mean() <= 3.35


def test_invalid_geometry_rejected():
    with pytest.raises(ConfigError):
        MergeEnv(EnvConfig(ramp_length=-1.0))
    with pytest.raises(ConfigError):
        MergeEnv(EnvConfig(merge_zone_length=300.0))


def test_empty_traffic_gives_sentinels():
    env = empty_env()
    s = env.observe()
    assert s[2] == s[3] == s[5] == s[6] == CFG.sentinel_gap
    assert s[4] == s[7] == 0.0


# -- step ----------------------------------------------------------------------


def test_uniform_motion():
    env = empty_env(ego_v=30.0)
    x0 = env.state.ego.x
    env.step(0.0, dt=0.1)
    assert env.state.ego.x - x0 == pytest.approx(3.0, abs=1e-12)


def test_speed_floor_and_stop():
    # v = 1 - 5*0.3 < 0 so the speed floors at zero after 0.2 s
    env = empty_env(ego_v=1.0)
    x0 = env.state.ego.x
    _, out = env.step(-5.0, dt=0.3)
    assert env.state.ego.v == 0.0
    assert env.state.ego.x - x0 == pytest.approx(0.1, abs=1e-12)
    assert out.event == EV_NONE
    # 0.1 s already idle; 18 more ticks of 0.05 s reach the 1 s stop duration
    events = [env.step(-5.0)[1].event for _ in range(18)]
    assert events[-1] == EV_STOP
    assert events[:-1] == [EV_NONE] * 17


def test_accel_clamped():
    env = empty_env(ego_v=20.0)
    env.step(-12.0)
    assert env.state.ego.a == -5.0
    env.step(4.0)
    assert env.state.ego.a == 3.0


def test_step_after_terminal_raises():
    env = empty_env(ego_x=GEO.merge_point - 0.5, ego_v=20.0)
    _, out = env.step(0.0)
    assert out.terminal and out.event == EV_MERGED and out.reward_raw == 1.0
    with pytest.raises(EpisodeOverError):
        env.step(0.0)


def test_collision_detected_in_zone():
    env = empty_env(ego_x=200.0, ego_v=20.0)
    env.state.traffic = [Vehicle(5, MAIN, 203.0, 20.0, cooperation=CFG.c_min)]
    _, out = env.step(0.0)
    assert out.event == EV_COLLISION
    assert out.reward_raw == -1.0
    assert env.state.episode_status == "collided"


def test_overlap_before_zone_is_not_collision():
    env = empty_env(ego_x=100.0, ego_v=20.0)
    env.state.traffic = [Vehicle(5, MAIN, 103.0, 20.0, cooperation=CFG.c_min)]
    _, out = env.step(0.0)
    assert out.event == EV_NONE


@given(v=st.floats(0.0, 40.0), a=st.floats(-9.0, 3.0), dt=st.floats(1e-3, 1.0))
def test_kinematics_exact(v, a, dt):
    x, v_new, idle = advance(10.0, v, a, dt)
    if v + a * dt >= 0:
        assert x - 10.0 == pytest.approx(v * dt + 0.5 * a * dt * dt, abs=1e-9)
        assert idle == 0.0
    else:
        t_stop = -v / a
        assert v_new == 0.0
        assert x - 10.0 == pytest.approx(v * v / (-2.0 * a), abs=1e-9)
        assert idle == pytest.approx(dt - t_stop, abs=1e-12)
    assert v_new >= 0.0


def test_every_vehicle_kinematically_consistent():
    env = MergeEnv(CFG)
    env.reset(11)
    for _ in range(60):
        before = {v.id: (v.x, v.v) for v in env.state.traffic}
        state, _ = env.step(1.0)
        for veh in state.traffic:
            if veh.id in before:
                x0, v0 = before[veh.id]
                x, vv, _ = advance(x0, v0, veh.a, CFG.dt)
                assert veh.x == x and veh.v == vv
                assert CFG.emergency_decel <= veh.a <= CFG.accel_max


def test_single_terminal_event_per_episode():
    for seed in range(5):
        env = MergeEnv(CFG)
        env.reset(seed)
        terminal = 0
        while env.state.episode_status == RUNNING:
            _, out = env.step(1.0)
            terminal += out.terminal
            assert math.isfinite(out.reward_raw)
            assert out.terminal == (out.event in (EV_MERGED, EV_COLLISION, EV_STOP))
        assert terminal == 1


def test_timeout_counts_as_stop():
    env = empty_env(ego_v=0.0)
    env.cfg = EnvConfig(stop_duration=1e9, max_episode_time=2.0)
    out = None
    while env.state.episode_status == RUNNING:
        _, out = env.step(0.0)
    assert out.event == EV_STOP
    assert env.state.sim_time == pytest.approx(2.0)


# -- observe -------------------------------------------------------------------


def test_single_leader_same_speed():
    # front bumper 25 m ahead of the ego's front bumper, length 5 -> 20 m gap
    s = observe(make_state(100.0, 25.0, [(125.0, 25.0)]), CFG)
    assert s[2] == pytest.approx(20.0)
    assert s[3] == CFG.sentinel_gap and s[4] == 0.0
    assert s[5] == CFG.sentinel_gap


def test_ego_midway_has_equal_gaps():
    g = 12.0
    s = observe(make_state(100.0, 25.0, [(100.0 + 5.0 + g, 25.0), (100.0 - 5.0 - g, 30.0)]), CFG)
    assert s[2] == pytest.approx(g) and s[3] == pytest.approx(g)
    assert s[4] == pytest.approx(5.0)


def test_second_neighbours():
    s = observe(make_state(100.0, 20.0, [(150.0, 30.0), (130.0, 30.0), (80.0, 22.0), (40.0, 25.0)]), CFG)
    assert s[0] == GEO.merge_point - 100.0
    assert s[2] == pytest.approx(25.0) and s[5] == pytest.approx(45.0)
    assert s[3] == pytest.approx(15.0) and s[6] == pytest.approx(55.0)
    assert s[4] == pytest.approx(2.0) and s[7] == pytest.approx(5.0)


# -- reward --------------------------------------------------------------------


def test_reward_symmetric_gaps_zero():
    st_ = make_state(200.0, 25.0, [(200.0 + 5 + 30.0, 25.0), (200.0 - 5 - 30.0, 25.0)])
    assert reward(st_, EV_NONE, 0.1, CFG) == 0.0


def test_reward_terminal_values():
    st_ = make_state(200.0, 25.0)
    assert reward(st_, EV_MERGED, 0.1, CFG) == 1.0
    assert reward(st_, EV_COLLISION, 0.1, CFG) == -1.0
    assert reward(st_, EV_STOP, 0.1, CFG) == -1.0


def test_reward_limit():
    assert shaping_reward(0.0, 1e6, 1.0) == pytest.approx(-1.0, abs=1e-12)


def test_reward_zero_outside_zone():
    st_ = make_state(100.0, 25.0, [(110.0, 25.0)])
    assert reward(st_, EV_NONE, 0.1, CFG) == 0.0


def test_reward_rejects_nonpositive_alpha():
    with pytest.raises(ValueError):
        reward(make_state(200.0, 25.0), EV_NONE, 0.0, CFG)


gaps = st.floats(0.0, 400.0)


@given(d_p=gaps, d_f=gaps, alpha=st.floats(1e-3, 5.0))
def test_reward_bounded_and_symmetric(d_p, d_f, alpha):
    r = shaping_reward(d_p, d_f, alpha)
    assert -alpha <= r <= 0.0
    assert r == shaping_reward(d_f, d_p, alpha)


@given(d_f=st.floats(1.0, 400.0), lo=st.floats(0.0, 1.0), hi=st.floats(0.0, 1.0))
def test_reward_monotone_toward_equal_gaps(d_f, lo, hi):
    a, b = sorted((lo, hi))
    if b - a < 1e-3:
        return
    assert shaping_reward(a * d_f, d_f, 0.1) < shaping_reward(b * d_f, d_f, 0.1)


# -- driver policy -------------------------------------------------------------


def test_free_flow_equilibrium():
    veh = Vehicle(1, MAIN, 0.0, CFG.speed_limit)
    assert abs(cooperative_driver_policy(veh, None, None, CFG)) < 0.05


def test_min_cooperation_ignores_ego():
    veh = Vehicle(1, MAIN, 180.0, 30.0, cooperation=CFG.c_min)
    leader = Vehicle(2, MAIN, 260.0, 28.0)
    ego = Vehicle(0, RAMP, 200.0, 20.0)
    with_ego = cooperative_driver_policy(veh, leader, ego, CFG, ego_in_zone=True)
    pure = cooperative_driver_policy(veh, leader, None, CFG)
    assert with_ego == pure
    assert pure == idm_acceleration(30.0, CFG, 260.0 - 5.0 - 180.0, 28.0)


def test_full_cooperation_yields():
    veh = Vehicle(1, MAIN, 180.0, 30.0, cooperation=1.0)
    leader = Vehicle(2, MAIN, 300.0, 30.0)
    ego = Vehicle(0, RAMP, 210.0, 25.0)
    yielding = cooperative_driver_policy(veh, leader, ego, CFG, ego_in_zone=True)
    assert yielding < cooperative_driver_policy(veh, leader, ego, CFG, ego_in_zone=False)


def test_emergency_floor_engaged():
    veh = Vehicle(1, MAIN, 100.0, 20.0)
    leader = Vehicle(2, MAIN, 100.0 + 5.0 + 5.0, 0.0)
    assert cooperative_driver_policy(veh, leader, None, CFG) == -9.0


def test_emergency_braking_counted_at_onset():
    env = empty_env(ego_x=60.0, ego_v=0.0)
    env.state.traffic = [Vehicle(2, MAIN, 120.0, 0.0), Vehicle(1, MAIN, 100.0, 25.0)]
    _, first = env.step(0.0)
    assert first.emergency_onsets == 1
    assert first.event == "emergency_braking" and not first.terminal
    _, second = env.step(0.0)
    assert second.emergency_onsets == 0


# -- trace export --------------------------------------------------------------


def test_trace_export(tmp_path):
    env = MergeEnv(CFG, record_trace=True)
    env.reset(2)
    for _ in range(5):
        env.step(0.0)
    path = tmp_path / "trace.csv"
    env.write_trace(path)
    rows = list(csv.reader(open(path)))
    assert rows[0] == ["sim_time", "vehicle_id", "lane", "position", "speed", "accel", "event"]
    assert {r[2] for r in rows[1:]} == {MAIN, RAMP}
    assert len({r[0] for r in rows[1:]}) == 6
