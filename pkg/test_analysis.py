"""宏观量、互协方差、基本图和输出文件测试"""

import filecmp
import math
import os

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings, strategies as st

from analysis import (
    CC_COLUMNS,
    DIAGRAM_COLUMNS,
    FREE_FLOW,
    SYNCHRONIZED,
    TIMESERIES_COLUMNS,
    UNDEFINED,
    WIDE_MOVING_JAM,
    MetricsRecorder,
    MetricsSample,
    cross_covariance,
    emit_outputs,
    free_flow_slope,
    fundamental_diagram,
    phase_label,
    phase_signature,
    plot_from_csv,
    sample,
    smooth_series,
    sweep_row,
)
from errors import DomainError
from multilane import RoadConfiguration
from scenario import ExitEvent, ExperimentConfig, RepetitionResult, run
from vehicle_model import VehicleState, obstacle_kind


def road_with(passenger, speeds, lanes=2):
    road = RoadConfiguration.empty(lanes)
    per_lane = [[] for _ in range(lanes)]
    for k, v in enumerate(speeds):
        per_lane[k % lanes].append(VehicleState(kind=passenger, x=10.0 * (k + 1), v=v, vid=k))
    for j, cells in enumerate(per_lane):
        road = road.with_lane(j, road.lanes[j].with_cells(cells))
    return road


def point(t, d, q):
    return MetricsSample(t=t, N=0, D=d, v_av=0.0, q=q, throughput10=0, latency=math.nan, empty=False)


def test_density_and_flow(passenger):
    s = sample(road_with(passenger, [20.0] * 50), t=1, road_length=5000.0)
    assert s.N == 50
    assert s.D == 0.01
    assert s.q == s.D * s.v_av


def test_average_speed(passenger):
    s = sample(road_with(passenger, [20.0, 30.0]), t=1, road_length=5000.0)
    assert s.v_av == 25.0
    assert s.q == s.D * 25.0


def test_empty_road_is_flagged():
    s = sample(RoadConfiguration.empty(3), t=4, road_length=5000.0)
    assert (s.N, s.D, s.v_av, s.q, s.empty) == (0, 0.0, 0.0, 0.0, True)


def test_obstacles_are_not_counted(passenger):
    road = road_with(passenger, [10.0])
    obstacle = VehicleState(kind=obstacle_kind(100.0), x=2500.0, v=0.0, vid=-1)
    road = road.with_lane(1, road.lanes[1].with_cells([obstacle]))
    s = sample(road, t=1, road_length=5000.0)
    assert s.N == 1
    assert s.v_av == 10.0


def test_recorder_refreshes_every_window():
    recorder = MetricsRecorder(road_length=1000.0, window=10)
    road = RoadConfiguration.empty(2)
    exits = [ExitEvent(1, 0, "passenger", 0.0, 4.0), ExitEvent(2, 1, "passenger", 2.0, 8.0)]
    first = recorder.record(road, exits, 4)
    assert first.throughput10 == 0
    assert math.isnan(first.latency)
    tenth = recorder.record(road, [], 10)
    assert tenth.throughput10 == 2
    assert tenth.latency == 5.0
    later = recorder.record(road, [], 15)
    assert later.throughput10 == 2
    twentieth = recorder.record(road, [], 20)
    assert twentieth.throughput10 == 0
    assert math.isnan(twentieth.latency)


def test_cross_covariance_signs():
    densities = [0.01, 0.02, 0.03, 0.05]
    rising = [[point(1, d, 2 * d + 1)] for d in densities]
    falling = [[point(1, d, -d)] for d in densities]
    assert cross_covariance(rising)["cc"].tolist() == [pytest.approx(1.0)]
    assert cross_covariance(falling)["cc"].tolist() == [pytest.approx(-1.0)]


def test_constant_series_are_omitted():
    ensemble = [[point(1, 0.01, 0.2), point(2, 0.01 * r, 0.3 * r)] for r in range(1, 4)]
    table = cross_covariance(ensemble)
    assert list(table.columns) == CC_COLUMNS
    assert table["t"].tolist() == [2]


def test_single_repetition_has_no_cross_covariance():
    assert cross_covariance([[point(1, 0.01, 0.2)]]).empty


def test_phase_labels():
    assert phase_label(0.8) == FREE_FLOW
    assert phase_label(0.1) == SYNCHRONIZED
    assert phase_label(-0.2) == SYNCHRONIZED
    assert phase_label(-0.6) == WIDE_MOVING_JAM
    assert phase_label(math.nan) == UNDEFINED


def test_single_sample_makes_single_bin():
    diagram = fundamental_diagram([[point(1, 0.012, 0.3)]], bin_width=0.005)
    assert len(diagram) == 1
    assert diagram["density"].tolist() == [pytest.approx(0.0125)]
    assert diagram["q"].tolist() == [0.3]
    assert diagram["samples"].tolist() == [1]
    assert diagram["phase"].tolist() == [UNDEFINED]


def test_same_bin_samples_are_averaged():
    diagram = fundamental_diagram([[point(1, 0.011, 0.2), point(2, 0.013, 0.4)]], bin_width=0.005)
    assert diagram["q"].tolist() == [pytest.approx(0.3)]


def test_bins_use_density_per_lane():
    diagram = fundamental_diagram([[point(1, 0.036, 0.6)]], bin_width=0.005, lanes=3)
    assert diagram["density"].tolist() == [pytest.approx(0.0125)]
    assert diagram["q"].tolist() == [pytest.approx(0.2)]


def test_empty_ensemble_gives_empty_diagram():
    diagram = fundamental_diagram([], bin_width=0.005)
    assert diagram.empty
    assert list(diagram.columns) == DIAGRAM_COLUMNS
    with pytest.raises(DomainError):
        fundamental_diagram([], bin_width=0.0)


samples_strategy = st.lists(
    st.lists(st.tuples(st.floats(min_value=0.0, max_value=0.1), st.floats(min_value=0.0, max_value=2.0)),
             min_size=3, max_size=3),
    min_size=2, max_size=5,
)


@settings(max_examples=50, deadline=None)
@given(raw=samples_strategy, order=st.randoms(use_true_random=False))
def test_diagram_ignores_sample_order(raw, order):
    ensemble = [[point(t + 1, d, q) for t, (d, q) in enumerate(series)] for series in raw]
    shuffled = [list(series) for series in ensemble]
    for series in shuffled:
        order.shuffle(series)
    order.shuffle(shuffled)
    pd.testing.assert_frame_equal(fundamental_diagram(ensemble), fundamental_diagram(shuffled))


@settings(max_examples=50, deadline=None)
@given(raw=samples_strategy)
def test_cross_covariance_is_bounded(raw):
    ensemble = [[point(t + 1, d, q) for t, (d, q) in enumerate(series)] for series in raw]
    cc = cross_covariance(ensemble)["cc"]
    assert ((cc >= -1.0) & (cc <= 1.0)).all()


def test_free_flow_slope_uses_sample_densities():
    # 每车道 v = 28: q/M = 28·D/M；同一分箱内密度不同的样本不能被分箱中心替代
    densities = [0.0021, 0.0024, 0.0063, 0.0111, 0.09]
    ensemble = [[point(t + 1, 3 * d, 3 * d * (28.0 if d < 0.02 else 5.0)) for t, d in enumerate(densities)]]
    assert free_flow_slope(ensemble, max_density=0.02, lanes=3) == pytest.approx(28.0)
    assert math.isnan(free_flow_slope(ensemble, max_density=0.001, lanes=3))


def test_free_flow_slope_ignores_empty_road():
    ensemble = [[point(1, 0.0, 0.0), point(2, 0.004, 0.1)]]
    assert free_flow_slope(ensemble, max_density=0.02) == pytest.approx(25.0)
    assert math.isnan(free_flow_slope([[point(1, 0.0, 0.0)]], max_density=0.02))


def test_smooth_series():
    values = pd.Series([0.0, 3.0, 0.0, 3.0])
    assert smooth_series(values, 1) is values
    assert smooth_series(values, 3).tolist() == pytest.approx([1.5, 1.0, 2.0, 1.5])


def test_empty_results_write_header_only_csv(tmp_path):
    emit_outputs([], str(tmp_path))
    with open(tmp_path / "fundamental_diagram.csv", encoding="utf-8") as f:
        assert f.read() == ",".join(DIAGRAM_COLUMNS) + "\n"
    with open(tmp_path / "cross_covariance.csv", encoding="utf-8") as f:
        assert f.read() == ",".join(CC_COLUMNS) + "\n"
    assert os.path.exists(tmp_path / "fundamental_diagram.svg")


def small_results():
    cfg = ExperimentConfig(name="tiny", road_length=600.0, lanes=2, iterations=40, repetitions=3,
                           emission_rate=1.0)
    return cfg, run(cfg)


def test_outputs_are_byte_identical(tmp_path):
    cfg, results = small_results()
    first, second = tmp_path / "a", tmp_path / "b"
    outputs = emit_outputs(results, str(first), cfg.lanes)
    emit_outputs(results, str(second), cfg.lanes)
    names = sorted(os.listdir(first))
    assert names == sorted(os.listdir(second))
    _, mismatch, errors = filecmp.cmpfiles(first, second, names, shallow=False)
    assert mismatch == [] and errors == []
    assert len(pd.read_csv(first / "fundamental_diagram.csv")) == len(outputs["diagram"])


def test_timeseries_csv_schema(tmp_path):
    cfg, results = small_results()
    emit_outputs(results, str(tmp_path), cfg.lanes)
    frame = pd.read_csv(tmp_path / "timeseries_rep000.csv", float_precision="round_trip")
    assert list(frame.columns) == TIMESERIES_COLUMNS
    assert len(frame) == cfg.iterations
    assert np.array_equal(frame["q"].to_numpy(), (frame["D"] * frame["v_av"]).to_numpy())
    summary = pd.read_csv(tmp_path / "summary.csv")
    assert summary["repetition"].tolist() == [0, 1, 2]


def test_plot_from_csv_with_smoothing(tmp_path):
    cfg, results = small_results()
    emit_outputs(results, str(tmp_path), cfg.lanes)
    os.remove(tmp_path / "cross_covariance.svg")
    paths = plot_from_csv(str(tmp_path), smooth=5)
    assert all(os.path.exists(p) for p in paths)
    with open(paths[1], encoding="utf-8") as f:
        assert f.read().lstrip().startswith("<?xml")


def test_sweep_row():
    cfg = ExperimentConfig(name="row")
    samples = [point(t, 0.01, 0.3) for t in range(1, 21)]
    result = RepetitionResult(repetition=0, samples=samples)
    row = sweep_row(cfg, [result], fundamental_diagram([samples], lanes=cfg.lanes))
    assert row["name"] == "row"
    assert row["peak_flow"] == pytest.approx(0.1)
    assert row["mean_throughput10"] == 0.0
    assert math.isnan(row["mean_latency"])


def test_phase_signature_of_three_phase_curve():
    t = np.arange(1, 201)
    cc = np.where(t <= 60, 0.9, np.where(t <= 160, 0.05, -0.5))
    signature = phase_signature(pd.DataFrame({"t": t, "cc": cc}), iterations=200, smooth=1)
    assert signature.loading_cc == pytest.approx(0.9)
    assert signature.synchronized_run == 100
    assert signature.tail_cc == pytest.approx(-0.5)


def test_phase_signature_breaks_run_at_missing_times():
    t = np.array([1, 2, 3, 5, 6, 7, 8])
    table = pd.DataFrame({"t": t, "cc": np.zeros(len(t))})
    assert phase_signature(table, iterations=10, smooth=1).synchronized_run == 4


def test_phase_signature_of_empty_table():
    signature = phase_signature(pd.DataFrame(columns=CC_COLUMNS), iterations=100)
    assert signature.synchronized_run == 0
    assert math.isnan(signature.loading_cc) and math.isnan(signature.tail_cc)
