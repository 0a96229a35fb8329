import logging
import math
import os
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402

from config import (  # noqa: E402
    CC_SMOOTHING,
    DENSITY_BIN_WIDTH,
    LOADING_WINDOW,
    PHASE_CC_THRESHOLD,
    SATURATED_TAIL_FRACTION,
    THROUGHPUT_WINDOW,
)
from errors import DomainError  # noqa: E402

logger = logging.getLogger(__name__)

TIMESERIES_COLUMNS = ["t", "N", "D", "v_av", "q", "throughput10", "latency", "empty"]
DIAGRAM_COLUMNS = ["density", "q", "cc", "samples", "phase"]
CC_COLUMNS = ["t", "cc"]
SUMMARY_COLUMNS = ["repetition", "emitted", "dropped", "processed", "in_road"]

FREE_FLOW = "free_flow"
SYNCHRONIZED = "synchronized"
WIDE_MOVING_JAM = "wide_moving_jam"
UNDEFINED = "undefined"

# SVG 输出不带时间戳、元素 id 固定，保证同样的输入得到同样的字节
matplotlib.rcParams["svg.hashsalt"] = "fuzzy-cca-traffic"
SVG_METADATA = {"Date": None, "Creator": None}


@dataclass(frozen=True)
class MetricsSample:
    """时刻 t 的宏观量: 密度 D = N/L (辆/米)，流量 q = D·v_av (辆/秒)"""

    t: int
    N: int
    D: float
    v_av: float
    q: float
    throughput10: int
    latency: float
    empty: bool


def sample(road, t: int, road_length: float, throughput10: int = 0,
           latency: float = math.nan) -> MetricsSample:
    """按定义计算一个时刻的宏观量，障碍物不计入；空路的 v_av 记为 0"""
    speeds = [cell.v for _, cell in road.vehicles() if not cell.kind.is_obstacle]
    n = len(speeds)
    density = n / road_length
    v_av = float(np.mean(speeds)) if n else 0.0
    return MetricsSample(
        t=t, N=n, D=density, v_av=v_av, q=density * v_av,
        throughput10=throughput10, latency=latency, empty=n == 0,
    )


class MetricsRecorder:
    """逐步记录宏观量，每 10 秒刷新一次处理车辆数和平均延误"""

    def __init__(self, road_length: float, window: int = THROUGHPUT_WINDOW):
        self.road_length = road_length
        self.window = window
        self._pending: List[float] = []
        self._throughput = 0
        self._latency = math.nan

    def record(self, road, exits: Sequence, t: int) -> MetricsSample:
        self._pending.extend(e.latency for e in exits)
        if t % self.window == 0:
            self._throughput = len(self._pending)
            self._latency = float(np.mean(self._pending)) if self._pending else math.nan
            self._pending = []
        return sample(road, t, self.road_length, self._throughput, self._latency)


def timeseries_frame(samples: Sequence[MetricsSample]) -> pd.DataFrame:
    if not samples:
        return pd.DataFrame(columns=TIMESERIES_COLUMNS)
    return pd.DataFrame([asdict(s) for s in samples], columns=TIMESERIES_COLUMNS)


def ensemble_frame(ensemble: Sequence[Sequence[MetricsSample]]) -> pd.DataFrame:
    """所有重复实验的样本，附带 repetition 列"""
    frames = []
    for r, series in enumerate(ensemble):
        frame = timeseries_frame(series)
        frame.insert(0, "repetition", r)
        frames.append(frame)
    if not frames:
        return pd.DataFrame(columns=["repetition"] + TIMESERIES_COLUMNS)
    return pd.concat(frames, ignore_index=True)


def _normalized_cross_covariance(q: np.ndarray, d: np.ndarray) -> float:
    """(⟨qD⟩ - ⟨q⟩⟨D⟩) / sqrt((⟨q²⟩ - ⟨q⟩²)(⟨D²⟩ - ⟨D⟩²))；任一方差为 0 时无定义"""
    if len(q) < 2 or np.all(q == q[0]) or np.all(d == d[0]):
        return math.nan
    dq = q - q.mean()
    dd = d - d.mean()
    var_q = np.mean(dq * dq)
    var_d = np.mean(dd * dd)
    if not (var_q > 0 and var_d > 0):
        return math.nan
    cc = np.mean(dq * dd) / math.sqrt(var_q * var_d)
    return float(min(1.0, max(-1.0, cc)))


def cross_covariance(ensemble: Sequence[Sequence[MetricsSample]]) -> pd.DataFrame:
    """每个时刻在所有重复实验之间计算 cc(q, D)，无定义的时刻不输出"""
    frame = ensemble_frame(ensemble)
    if len(ensemble) < 2:
        if ensemble:
            logger.warning("⚠️ 只有一次重复实验，无法计算互协方差")
        return pd.DataFrame(columns=CC_COLUMNS)
    rows = []
    for t, group in frame.groupby("t", sort=True):
        group = group.sort_values(["q", "D"], kind="mergesort")
        cc = _normalized_cross_covariance(group["q"].to_numpy(float), group["D"].to_numpy(float))
        if not math.isnan(cc):
            rows.append({"t": int(t), "cc": cc})
    return pd.DataFrame(rows, columns=CC_COLUMNS)


def phase_label(cc: float) -> str:
    """cc > 0.2 自由流，|cc| <= 0.2 同步流，cc < -0.2 宽运动堵塞"""
    if cc is None or math.isnan(cc):
        return UNDEFINED
    if cc > PHASE_CC_THRESHOLD:
        return FREE_FLOW
    if cc < -PHASE_CC_THRESHOLD:
        return WIDE_MOVING_JAM
    return SYNCHRONIZED


def fundamental_diagram(ensemble: Sequence[Sequence[MetricsSample]], bin_width: float = DENSITY_BIN_WIDTH,
                        lanes: int = 1, cc_table: Optional[pd.DataFrame] = None) -> pd.DataFrame:
    """基本图: 所有重复、所有时刻的样本按每车道密度 D/M 分箱，取各箱每车道流量 q/M 和 cc 的均值

    先排序再聚合，结果与样本输入顺序无关。
    """
    if bin_width <= 0:
        raise DomainError(f"分箱宽度必须为正: {bin_width}")
    frame = ensemble_frame(ensemble)
    if frame.empty:
        return pd.DataFrame(columns=DIAGRAM_COLUMNS)
    if cc_table is None:
        cc_table = cross_covariance(ensemble)
    cc_by_t = dict(zip(cc_table["t"].astype(int), cc_table["cc"].astype(float)))

    per_lane = frame["D"].to_numpy(float) / lanes
    points = pd.DataFrame({
        "bin": np.floor(per_lane / bin_width).astype(np.int64),
        "q": frame["q"].to_numpy(float) / lanes,
        "cc": [cc_by_t.get(int(t), math.nan) for t in frame["t"]],
    })
    points = points.sort_values(["bin", "q", "cc"], kind="mergesort", na_position="last")

    rows = []
    for k, group in points.groupby("bin", sort=True):
        cc_values = group["cc"].dropna().to_numpy(float)
        cc_mean = float(cc_values.mean()) if len(cc_values) else math.nan
        rows.append({
            "density": (int(k) + 0.5) * bin_width,
            "q": float(group["q"].to_numpy(float).mean()),
            "cc": cc_mean,
            "samples": int(len(group)),
            "phase": phase_label(cc_mean),
        })
    return pd.DataFrame(rows, columns=DIAGRAM_COLUMNS)


def peak_flow(diagram: pd.DataFrame) -> float:
    return float(diagram["q"].max()) if len(diagram) else 0.0


def free_flow_slope(ensemble: Sequence[Sequence[MetricsSample]], max_density: float,
                    lanes: int = 1) -> float:
    """低密度段每车道 q/M 对 D/M 的最小二乘斜率 (过原点)，单位 m/s

    直接用各样本的实际密度回归，不用分箱中心。
    """
    frame = ensemble_frame(ensemble)
    d = frame["D"].to_numpy(float) / lanes
    q = frame["q"].to_numpy(float) / lanes
    low = (d > 0) & (d < max_density)
    if not low.any():
        return math.nan
    d, q = d[low], q[low]
    return float(np.dot(d, q) / np.dot(d, d))


def summary_frame(results: Sequence) -> pd.DataFrame:
    rows = [{
        "repetition": r.repetition, "emitted": r.emitted, "dropped": r.dropped,
        "processed": r.processed, "in_road": r.in_road,
    } for r in results]
    return pd.DataFrame(rows, columns=SUMMARY_COLUMNS)


def smooth_series(values: pd.Series, width: int) -> pd.Series:
    """宽度为 width 的居中滑动平均，width <= 1 时原样返回"""
    if width <= 1:
        return values
    return values.rolling(window=width, center=True, min_periods=1).mean()


@dataclass(frozen=True)
class PhaseSignature:
    """cc(t) 曲线的三段特征: 加载阶段均值、最长同步流窗口、饱和段均值"""

    loading_cc: float
    synchronized_run: int
    tail_cc: float


def phase_signature(cc_table: pd.DataFrame, iterations: int, smooth: int = CC_SMOOTHING,
                    loading_window: int = LOADING_WINDOW,
                    tail_fraction: float = SATURATED_TAIL_FRACTION) -> PhaseSignature:
    """从互协方差表提取三相特征

    同步流窗口: 平滑后 |cc| < 0.2 的最长连续秒数，cc 无定义的时刻视为中断。
    """
    t = cc_table["t"].to_numpy(np.int64)
    cc = cc_table["cc"].to_numpy(float)
    loading = cc[t <= loading_window]
    tail = cc[t > (1.0 - tail_fraction) * iterations]

    smoothed = smooth_series(pd.Series(cc), smooth).to_numpy(float)
    longest = run = 0
    previous = None
    for ti, value in zip(t, smoothed):
        if abs(value) < PHASE_CC_THRESHOLD:
            run = run + 1 if previous is not None and ti == previous + 1 else 1
        else:
            run = 0
        previous = ti if abs(value) < PHASE_CC_THRESHOLD else None
        longest = max(longest, run)

    return PhaseSignature(
        loading_cc=float(loading.mean()) if len(loading) else math.nan,
        synchronized_run=longest,
        tail_cc=float(tail.mean()) if len(tail) else math.nan,
    )


def _write_csv(frame: pd.DataFrame, path: str) -> None:
    frame.to_csv(path, index=False, lineterminator="\n")


def render_plots(diagram: pd.DataFrame, cc_table: pd.DataFrame, out_dir: str, smooth: int = 1) -> List[str]:
    """基本图 (q-D，叠加 cc) 和 cc(t) 两张 SVG"""
    paths = []

    fig, ax = plt.subplots(figsize=(7, 4.5))
    ax.plot(diagram["density"].astype(float), diagram["q"].astype(float), "o-", color="tab:blue", markersize=3)
    ax.set_xlabel("D (veh/m/lane)")
    ax.set_ylabel("q (veh/s/lane)", color="tab:blue")
    twin = ax.twinx()
    twin.plot(diagram["density"].astype(float), diagram["cc"].astype(float), "s--", color="tab:red", markersize=2)
    twin.set_ylabel("cc(q, D)", color="tab:red")
    twin.set_ylim(-1.05, 1.05)
    ax.set_title("Fundamental diagram")
    fig.tight_layout()
    path = os.path.join(out_dir, "fundamental_diagram.svg")
    fig.savefig(path, format="svg", metadata=SVG_METADATA)
    plt.close(fig)
    paths.append(path)

    fig, ax = plt.subplots(figsize=(7, 3.5))
    cc = smooth_series(cc_table["cc"].astype(float), smooth)
    ax.plot(cc_table["t"].astype(float), cc, color="tab:red", linewidth=1)
    ax.axhline(PHASE_CC_THRESHOLD, color="grey", linewidth=0.5, linestyle=":")
    ax.axhline(-PHASE_CC_THRESHOLD, color="grey", linewidth=0.5, linestyle=":")
    ax.set_xlabel("t (s)")
    ax.set_ylabel("cc(q, D)")
    ax.set_ylim(-1.05, 1.05)
    fig.tight_layout()
    path = os.path.join(out_dir, "cross_covariance.svg")
    fig.savefig(path, format="svg", metadata=SVG_METADATA)
    plt.close(fig)
    paths.append(path)
    return paths


def emit_outputs(results: Sequence, out_dir: str, lanes: int = 1,
                 bin_width: float = DENSITY_BIN_WIDTH) -> Dict[str, pd.DataFrame]:
    """写出每次重复的时间序列、基本图、互协方差、计数汇总和 SVG 图"""
    os.makedirs(out_dir, exist_ok=True)
    ensemble = [r.samples for r in results]
    for r in results:
        _write_csv(timeseries_frame(r.samples), os.path.join(out_dir, f"timeseries_rep{r.repetition:03d}.csv"))

    cc_table = cross_covariance(ensemble)
    diagram = fundamental_diagram(ensemble, bin_width, lanes, cc_table)
    summary = summary_frame(results)
    _write_csv(diagram, os.path.join(out_dir, "fundamental_diagram.csv"))
    _write_csv(cc_table, os.path.join(out_dir, "cross_covariance.csv"))
    _write_csv(summary, os.path.join(out_dir, "summary.csv"))
    render_plots(diagram, cc_table, out_dir)

    logger.info(f"📊 输出已写入 {out_dir}: {len(results)} 个时间序列, 基本图 {len(diagram)} 个分箱, "
                f"每车道峰值流量 {peak_flow(diagram):.3f} 辆/秒")
    return {"diagram": diagram, "cc": cc_table, "summary": summary}


def plot_from_csv(out_dir: str, smooth: int = 1) -> List[str]:
    """从已有的 CSV 重新绘图，smooth > 1 时对 cc(t) 做滑动平均"""
    diagram = pd.read_csv(os.path.join(out_dir, "fundamental_diagram.csv"))
    cc_table = pd.read_csv(os.path.join(out_dir, "cross_covariance.csv"))
    return render_plots(diagram, cc_table, out_dir, smooth)


def sweep_row(cfg, results: Sequence, diagram: pd.DataFrame) -> Dict[str, object]:
    """扫参汇总的一行: 峰值分箱流量、平均吞吐量和平均延误"""
    window_ends = [s for r in results for s in r.samples if s.t % THROUGHPUT_WINDOW == 0]
    latencies = [s.latency for s in window_ends if not math.isnan(s.latency)]
    return {
        "name": cfg.name,
        "emission_rate": cfg.emission_rate,
        "long_fraction": cfg.long_fraction,
        "influence_radius": cfg.influence_radius,
        "obstacle": cfg.obstacle,
        "lanes": cfg.lanes,
        "peak_flow": peak_flow(diagram),
        "mean_throughput10": float(np.mean([s.throughput10 for s in window_ends])) if window_ends else 0.0,
        "mean_latency": float(np.mean(latencies)) if latencies else math.nan,
    }


def write_sweep_summary(rows: Sequence[Dict[str, object]], path: str) -> pd.DataFrame:
    frame = pd.DataFrame(list(rows), columns=[
        "name", "emission_rate", "long_fraction", "influence_radius", "obstacle", "lanes",
        "peak_flow", "mean_throughput10", "mean_latency",
    ])
    _write_csv(frame, path)
    return frame
