"""单车道演化测试: 加速度、速度/位置、压力和换道意愿"""

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from config import KINDS_FILE, LEFT_PREFERENCE, RULES_FILE
from errors import DomainError
from fuzzy_engine import load_rule_base
from lane_dynamics import (
    DynamicsSettings,
    _kind_desires,
    accumulate_stress,
    acceleration,
    eval_lane_desire,
    phi,
    step_lane,
    stress_transition,
    update_position,
    update_stress,
    update_velocity,
)
from random_streams import KeyedRNG
from vehicle_model import (
    Blockers,
    Direction,
    LaneConfiguration,
    VehicleState,
    is_physical,
    load_kinds,
    obstacle_kind,
)

KINDS = load_kinds(KINDS_FILE)
PASSENGER = KINDS["passenger"]
LONG = KINDS["long"]
RULES = load_rule_base(RULES_FILE)
TRIALS = 10_000


def within_three_sigma(hits, trials, p):
    sigma = math.sqrt(p * (1.0 - p) / trials)
    return abs(hits / trials - p) <= 3.0 * sigma


def test_jam_start_accelerates_strongly(quiet_settings, rng, make_lane):
    lane = make_lane([(100.0, 1.0)])
    assert acceleration(lane, 0, Blockers.open_road(), rng, 1, quiet_settings) == 3.0


def test_tight_platoon_brakes(quiet_settings, rng, make_lane):
    lane = make_lane([(100.0, 10.0), (106.0, 10.0)])
    assert acceleration(lane, 0, Blockers.open_road(), rng, 1, quiet_settings) == -1.0


def test_acceleration_rejects_unoccupied_index(quiet_settings, rng, make_lane):
    with pytest.raises(DomainError):
        acceleration(make_lane([(100.0, 1.0)]), 1, Blockers.open_road(), rng, 1, quiet_settings)


def test_acceleration_noise_comes_from_keyed_stream(rule_base, make_lane):
    lane = make_lane([(100.0, 1.0)])
    noisy = DynamicsSettings(rule_base=rule_base, noise_enabled=True)
    rng = KeyedRNG(seed=11)
    expected = 3.0 + PASSENGER.accel_noise * KeyedRNG(seed=11).normal(5, 0)
    assert acceleration(lane, 0, Blockers.open_road(), rng, 5, noisy) == pytest.approx(expected)


def test_constant_acceleration_override(rule_base, rng, make_lane):
    lane = make_lane([(100.0, 1.0), (106.0, 10.0)])
    nasch = DynamicsSettings(rule_base=rule_base, noise_enabled=False, accel_override=7.5)
    assert acceleration(lane, 0, Blockers.open_road(), rng, 1, nasch) == 7.5


def test_update_velocity_clamps():
    assert update_velocity(10.0, 36.0, math.inf, 3.0) == 13.0
    assert update_velocity(10.0, 36.0, 5.0, 3.0) == 5.0
    assert update_velocity(1.0, 36.0, math.inf, -5.0) == 0.0
    assert update_velocity(35.0, 36.0, math.inf, 3.0) == 36.0
    assert update_position(10.0, 5.0) == 15.0


def test_update_velocity_never_negative():
    # 浮点误差可能让 FD 或 barrier 略小于 0
    assert update_velocity(5.0, 36.0, -1.42e-14, 7.5) == 0.0
    speeds = update_velocity(np.array([5.0, 5.0]), 36.0, np.array([-1e-12, 3.0]), np.array([7.5, 7.5]))
    assert speeds.tolist() == [0.0, 3.0]


def test_follower_closing_on_stopped_leader_at_stop_line(rule_base, make_vehicle):
    settings_ = DynamicsSettings(rule_base=rule_base, noise_enabled=False, accel_override=7.5)
    blockers = Blockers(stop_line=1000.0, radius=10.0)
    lane = LaneConfiguration((
        make_vehicle(900.0 + 0.3, v=5.0, vid=0),
        make_vehicle(1000.0 - PASSENGER.length / 2.0, v=0.0, vid=1),
    ), left_exists=False, right_exists=True)
    rng = KeyedRNG(seed=11)
    for t in range(1, 40):
        lane = step_lane(lane, blockers, rng, t, settings_)
        assert all(cell.v >= 0.0 for cell in lane)
        assert is_physical(lane)
    assert lane[0].front <= lane[1].rear + 1e-9


def test_stress_transition_branches():
    # 窗口外 (s_acc >= 0) 不变
    assert stress_transition(1.0, 5.0, 0.5, -450.0, 500.0) == 1.0
    # 窗口内且前车远离: 减半
    assert stress_transition(-100.0, -1.0, 0.5, -450.0, 500.0) == -50.0
    # 窗口内且前车接近: 乘以 1 + Φ
    assert stress_transition(-100.0, 2.0, 0.5, -450.0, 500.0) == -150.0
    # 截断到 [s_min, s_max]
    assert stress_transition(600.0, 2.0, 0.0, -450.0, 500.0) == 500.0
    assert stress_transition(-500.0, 2.0, 0.0, -450.0, 500.0) == -450.0


def test_accumulate_stress():
    assert accumulate_stress(0.0, 20.0, 28.0, 0.5) == -4.0
    assert accumulate_stress(10.0, 30.0, 28.0, 1.0) == 12.0


def test_phi_degree():
    assert phi(2.0, 15.0, PASSENGER) == 0.5
    assert phi(20.0, 15.0, PASSENGER) == 0.0
    assert phi(1.0, 40.0, PASSENGER) == 1.0


def test_update_stress_uses_stress_stream():
    rng = KeyedRNG(seed=3)
    x = KeyedRNG(seed=3).uniform(4, 9, "stress")
    expected = stress_transition(accumulate_stress(-10.0, 20.0, PASSENGER.v_opt, x), 5.0, 0.2,
                                 PASSENGER.s_min, PASSENGER.s_max)
    assert update_stress(-10.0, 20.0, PASSENGER, 5.0, 0.2, rng, 4, 9) == expected


def desire_counts(kind, v, s, left_exists, right_exists, seed=1):
    codes = _kind_desires(kind, np.full(TRIALS, float(v)), np.full(TRIALS, float(s)), np.arange(TRIALS),
                          left_exists, right_exists, KeyedRNG(seed), 1)
    return {direction: int(np.sum(codes == code)) for code, direction in
            ((0, Direction.NONE), (1, Direction.LEFT), (2, Direction.RIGHT))}


def test_relaxed_driver_at_zero_stress_keeps_lane():
    counts = desire_counts(PASSENGER, 20.0, 0.0, True, True)
    assert counts[Direction.NONE] == TRIALS


def test_fully_relaxed_driver_moves_right():
    counts = desire_counts(PASSENGER, 20.0, PASSENGER.s_max, True, True)
    assert counts[Direction.RIGHT] == TRIALS


def test_fully_stressed_fast_driver_overtakes_left():
    counts = desire_counts(PASSENGER, 30.0, PASSENGER.s_min, True, True)
    assert counts[Direction.LEFT] == TRIALS


def test_half_relaxed_driver_moves_right_half_the_time():
    counts = desire_counts(PASSENGER, 20.0, PASSENGER.s_max / 2.0, True, True)
    assert within_three_sigma(counts[Direction.RIGHT], TRIALS, 0.5)
    assert counts[Direction.LEFT] == 0


def test_jammed_middle_lane_prefers_left():
    counts = desire_counts(PASSENGER, 0.0, PASSENGER.s_min, True, True)
    assert counts[Direction.NONE] == 0
    assert within_three_sigma(counts[Direction.LEFT], TRIALS, LEFT_PREFERENCE)


def test_jammed_edge_lanes_have_one_way_out():
    assert desire_counts(PASSENGER, 0.0, PASSENGER.s_min, False, True)[Direction.RIGHT] == TRIALS
    assert desire_counts(PASSENGER, 0.0, PASSENGER.s_min, True, False)[Direction.LEFT] == TRIALS
    assert desire_counts(PASSENGER, 0.0, PASSENGER.s_min, False, False)[Direction.NONE] == TRIALS


def test_long_vehicle_left_probability_is_a_power_law():
    s = LONG.s_min / 2.0
    counts = desire_counts(LONG, 20.0, s, True, True)
    assert within_three_sigma(counts[Direction.LEFT], TRIALS, 0.5 ** 1.25)


def test_eval_lane_desire_matches_batch():
    rng = KeyedRNG(seed=5)
    codes = _kind_desires(PASSENGER, np.full(50, 10.0), np.full(50, -300.0), np.arange(50),
                          True, True, KeyedRNG(seed=5), 2)
    directions = (Direction.NONE, Direction.LEFT, Direction.RIGHT)
    for vid in range(50):
        d = eval_lane_desire(PASSENGER, 10.0, -300.0, True, True, rng, 2, vid)
        assert d is directions[int(codes[vid])]


def test_lone_vehicle_at_optimal_speed_accelerates_moderately(quiet_settings, rng, make_lane):
    # v = v_opt = 28, s = 0: ζ = 500/28 ≈ 17.9 属于 PFCT B，FD = +∞ 属于 FD B，V 不是 S
    # 只有 (PFCT B, FD B, not V S) → PM 触发，w = 1 时 GWAF 取 PM 的峰值
    lane = make_lane([(100.0, PASSENGER.v_opt)])
    assert acceleration(lane, 0, Blockers.open_road(), rng, 1, quiet_settings) == 1.75


def test_step_lane_moves_free_vehicle(quiet_settings, rng, make_lane):
    lane = make_lane([(100.0, 28.0)])
    cell = step_lane(lane, Blockers.open_road(), rng, 1, quiet_settings)[0]
    assert cell.v == 29.75
    assert cell.x == 129.75
    # s_acc = 0 + 1.75·X, X ∈ [0, 1)
    assert 0.0 <= cell.s < 1.75
    assert cell.d_prime is Direction.NONE


def test_stress_does_not_drift_at_optimal_speed(rule_base, rng, make_lane):
    settings_ = DynamicsSettings(rule_base=rule_base, noise_enabled=False, accel_override=0.0)
    lane = make_lane([(100.0, 28.0)])
    for t in range(1, 4):
        lane = step_lane(lane, Blockers.open_road(), rng, t, settings_)
    cell = lane[0]
    assert (cell.x, cell.v, cell.s) == (184.0, 28.0, 0.0)
    assert cell.d is Direction.NONE


def test_step_lane_keeps_obstacles_still(quiet_settings, rng, passenger):
    obstacle = VehicleState(kind=obstacle_kind(2000.0), x=2500.0, v=0.0, vid=-1)
    lane = LaneConfiguration((
        VehicleState(kind=passenger, x=1400.0, v=30.0, vid=0),
        obstacle,
    ), left_exists=True, right_exists=False)
    for t in range(1, 30):
        lane = step_lane(lane, Blockers.open_road(), rng, t, quiet_settings)
    assert lane[1] == obstacle
    assert lane[0].front <= obstacle.rear + 1e-9


def test_step_lane_never_crosses_stop_line(rule_base, make_lane):
    settings_ = DynamicsSettings(rule_base=rule_base)
    rng = KeyedRNG(seed=9)
    blockers = Blockers(stop_line=1000.0, radius=10.0)
    lane = make_lane([(600.0 + 20.0 * k, 30.0) for k in range(6)])
    for t in range(1, 120):
        lane = step_lane(lane, blockers, rng, t, settings_)
        assert all(cell.front <= 1000.0 + 1e-9 for cell in lane)


def test_step_lane_on_empty_lane(quiet_settings, rng):
    lane = LaneConfiguration((), left_exists=True, right_exists=True)
    assert step_lane(lane, Blockers.open_road(), rng, 1, quiet_settings) is lane


def test_step_lane_does_not_depend_on_stream_history(rule_base, make_lane):
    settings_ = DynamicsSettings(rule_base=rule_base)
    lane = make_lane([(50.0 * k, 15.0 + k) for k in range(8)], left_exists=True)
    fresh = step_lane(lane, Blockers.open_road(), KeyedRNG(seed=2), 7, settings_)
    used = KeyedRNG(seed=2)
    used.uniforms(7, np.arange(500), "stress")
    used.normals(7, np.arange(300))
    assert step_lane(lane, Blockers.open_road(), used, 7, settings_) == fresh


mixed_lanes = st.lists(
    st.tuples(st.floats(min_value=0.0, max_value=120.0),
              st.floats(min_value=0.0, max_value=1.0),
              st.floats(min_value=0.0, max_value=1.0),
              st.booleans()),
    min_size=1, max_size=12,
)


@settings(max_examples=60, deadline=None)
@given(entries=mixed_lanes, seed=st.integers(min_value=0, max_value=2 ** 32), t=st.integers(1, 1000))
def test_step_lane_stays_physical(entries, seed, t):
    cells = []
    front = 0.0
    for vid, (gap, v_frac, s_frac, is_long) in enumerate(entries):
        kind = LONG if is_long else PASSENGER
        x = front + gap + kind.length / 2.0
        s = kind.s_min + s_frac * (kind.s_max - kind.s_min)
        cells.append(VehicleState(kind=kind, x=x, v=v_frac * kind.v_max, s=s, vid=vid))
        front = x + kind.length / 2.0
    lane = LaneConfiguration(tuple(cells), left_exists=True, right_exists=True)
    after = step_lane(lane, Blockers(stop_line=front + 50.0, radius=25.0), KeyedRNG(seed), t,
                      DynamicsSettings(rule_base=RULES))
    assert is_physical(after)
    assert [c.vid for c in after] == [c.vid for c in lane]
    for before, now in zip(lane, after):
        assert 0.0 <= now.v <= before.kind.v_max
        assert now.x == before.x + now.v
        assert before.kind.s_min <= now.s <= before.kind.s_max
