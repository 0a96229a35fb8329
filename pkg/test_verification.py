"""性质检查套件的小规模运行"""

import os
from dataclasses import replace

import numpy as np
import pandas as pd
import pytest

import verification
from analysis import cross_covariance, phase_signature
from config import KINDS_FILE, LOADING_MIN_CC
from errors import ConfigError
from scenario import ExperimentConfig, load_experiment, run, sweep_configs
from verification import (
    CONFIG_DIR,
    check_collision_freedom,
    check_determinism,
    check_free_flow_slope,
    check_gwaf_symmetry,
    check_heterogeneity,
    check_meta_equivalence,
    check_nasch_reduction,
    check_obstacle_drop,
    check_sweep_determinism,
    default_suites,
    nasch_reference,
    random_road,
    run_suites,
    sampled_sweep,
)
from vehicle_model import is_physical, load_kinds

TINY = ExperimentConfig(name="tiny", road_length=1000.0, lanes=3, iterations=60, repetitions=2,
                        emission_rate=2.0, influence_radius=10.0)


def acceptance(name, **overrides):
    return replace(load_experiment(os.path.join(CONFIG_DIR, f"{name}.json")), **overrides)


def test_random_road_is_physical():
    kinds = list(load_kinds(KINDS_FILE).values())
    road = random_road(np.random.default_rng(0), kinds, 4, 20)
    assert road.M == 4
    assert all(is_physical(lane) for lane in road.lanes)


def test_nasch_reference_follows_the_leader():
    trace = nasch_reference([0.0, 10.0], [0.0, 0.0], [4.0, 4.0], v_max=36.0, acceleration=7.5, steps=2)
    assert trace[0] == [6.0, 7.5]
    assert trace[1] == [7.5, 15.0]


def test_collision_freedom_small():
    assert check_collision_freedom(TINY)


def test_meta_equivalence_small():
    assert check_meta_equivalence(cases=25, max_per_lane=8)


def test_gwaf_symmetry_small():
    assert check_gwaf_symmetry(cases=100)


def test_nasch_reduction():
    assert check_nasch_reduction(steps=200, vehicles=10)


def test_determinism_across_workers():
    assert check_determinism(replace(TINY, iterations=30), workers=2)


def test_default_suite_names():
    assert set(default_suites(cases=1)) == {
        "collision_freedom", "meta_equivalence", "gwaf_symmetry", "nasch_reduction",
        "free_flow_slope", "three_phase", "obstacle_drop", "heterogeneity", "determinism",
    }


def test_run_suites_reports_failures_and_errors():
    def broken():
        raise RuntimeError("boom")

    results = run_suites({"ok": lambda: True, "fails": lambda: False, "broken": broken})
    assert results == {"ok": True, "fails": False, "broken": False}
    assert run_suites({"ok": lambda: True, "fails": lambda: False}, only=["ok"]) == {"ok": True}



def test_sampled_sweep_spans_the_grid():
    grid = sweep_configs(TINY)
    picked = sampled_sweep(TINY, count=10)
    assert len(picked) == 10
    assert len({cfg.name for cfg in picked}) == 10
    assert picked[0] == grid[0]
    assert {cfg.emission_rate for cfg in picked} == {cfg.emission_rate for cfg in grid}
    assert sampled_sweep(TINY, count=len(grid) + 5) == grid


def test_sweep_determinism_small():
    configs = [replace(cfg, road_length=1000.0, iterations=20) for cfg in sampled_sweep(TINY, count=3)]
    assert check_sweep_determinism(configs, workers=2)


def test_free_flow_slope_matches_optimal_velocity():
    # 乘用车、λ=0.25、开放式收费: 斜率应落在 v_opt = 28 m/s ± 15%
    cfg = acceptance("free_flow", iterations=400, repetitions=2)
    assert cfg.long_fraction == 0.0 and cfg.open_tolling
    assert check_free_flow_slope(cfg)


def test_free_flow_slope_outside_tolerance_fails(monkeypatch):
    monkeypatch.setattr(verification, "run", lambda cfg, workers: [])
    monkeypatch.setattr(verification, "free_flow_slope", lambda ensemble, max_density, lanes: 33.0)
    assert not check_free_flow_slope(acceptance("free_flow"))
    monkeypatch.setattr(verification, "free_flow_slope", lambda ensemble, max_density, lanes: 31.5)
    assert check_free_flow_slope(acceptance("free_flow"))


def test_three_phase_loading_window_is_free_flow():
    cfg = acceptance("three_phase", iterations=120, repetitions=6)
    signature = phase_signature(cross_covariance([r.samples for r in run(cfg)]), cfg.iterations)
    assert signature.loading_cc > LOADING_MIN_CC


def test_three_phase_check_requires_negative_tail(monkeypatch):
    t = np.arange(1, 201)
    tail = {"cc": -0.5}

    def table(ensemble):
        cc = np.where(t <= 60, 0.9, np.where(t <= 160, 0.05, tail["cc"]))
        return pd.DataFrame({"t": t, "cc": cc})

    monkeypatch.setattr(verification, "run", lambda cfg, workers: [])
    monkeypatch.setattr(verification, "cross_covariance", table)
    cfg = replace(TINY, iterations=200)
    assert verification.check_three_phase(cfg)
    tail["cc"] = 0.35
    assert not verification.check_three_phase(cfg)


def test_obstacle_does_not_raise_peak_flow():
    cfg = acceptance("obstacle_right", road_length=2000.0, iterations=200, repetitions=2)
    assert check_obstacle_drop(cfg, min_drop=0.0)


def test_obstacle_check_needs_an_obstacle():
    with pytest.raises(ConfigError):
        check_obstacle_drop(replace(TINY, obstacle="none"))


def test_obstacle_check_compares_peaks(monkeypatch):
    peaks = {"right": 1.2, "none": 1.33}
    monkeypatch.setattr(verification, "_peak", lambda cfg, workers: peaks[cfg.obstacle])
    cfg = replace(TINY, obstacle="right")
    assert check_obstacle_drop(cfg)
    peaks["right"] = 1.3
    assert not check_obstacle_drop(cfg)


def test_long_vehicles_lower_peak_flow():
    cfg = acceptance("heterogeneity", iterations=150, repetitions=2)
    assert check_heterogeneity(cfg, fractions=[0.0, 0.3])


def test_heterogeneity_check_needs_non_increasing_peaks(monkeypatch):
    peaks = {0.0: 0.45, 0.1: 0.44, 0.2: 0.44, 0.3: 0.40}
    monkeypatch.setattr(verification, "_peak", lambda cfg, workers: peaks[cfg.long_fraction])
    assert check_heterogeneity(TINY)
    peaks[0.3] = 0.46
    assert not check_heterogeneity(TINY)
