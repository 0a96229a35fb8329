import filecmp
import logging
import math
import os
import tempfile
from dataclasses import replace
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from analysis import (
    cross_covariance,
    emit_outputs,
    free_flow_slope,
    fundamental_diagram,
    peak_flow,
    phase_signature,
)
from config import (
    BASE_DIR,
    DETERMINISM_ITERATIONS,
    DETERMINISM_SWEEP_CONFIGS,
    FREE_FLOW_MAX_DENSITY,
    FREE_FLOW_SLOPE_TOLERANCE,
    HETEROGENEITY_FRACTIONS,
    KINDS_FILE,
    LOADING_MIN_CC,
    NASCH_ACCELERATION,
    OBSTACLE_MIN_DROP,
    RULES_FILE,
    SEED,
    SYNCHRONIZED_MIN_RUN,
    THREE_PHASE_REPETITIONS,
)
from errors import ConfigError, InvariantViolation
from fuzzy_engine import MembershipFunction, gwaf, load_rule_base, preimage
from lane_dynamics import DynamicsSettings, step_lane
from multilane import RoadConfiguration, meta_cca_step, update_multilane
from random_streams import KeyedRNG
from scenario import ExperimentConfig, load_experiment, run, run_repetition, sweep_configs
from vehicle_model import (
    Blockers,
    Direction,
    Kind,
    LaneConfiguration,
    VehicleState,
    load_kinds,
)

logger = logging.getLogger(__name__)

_DIRECTIONS = (Direction.NONE, Direction.LEFT, Direction.RIGHT)
CONFIG_DIR = os.path.join(BASE_DIR, "configs")


def check_collision_freedom(cfg: ExperimentConfig) -> bool:
    """按配置跑完全部重复实验；每一步的物理性检查都在演化内部完成"""
    for r in range(cfg.repetitions):
        try:
            result = run_repetition(cfg, r)
        except InvariantViolation as e:
            logger.error(f"❌ 碰撞检测失败 (重复 {r}): {e}")
            return False
        if not result.balanced:
            logger.error(f"❌ 车辆计数不平衡 (重复 {r}): {result}")
            return False
    return True


def random_road(gen: np.random.Generator, kinds: List[Kind], lanes: int, max_per_lane: int,
                road_length: float = 2000.0) -> RoadConfiguration:
    """随机生成一个物理的多车道配置，换道意愿随机，d′ 全为 0"""
    road = RoadConfiguration.empty(lanes)
    vid = 0
    new_lanes = []
    for lane in road.lanes:
        cells = []
        x = 0.0
        for _ in range(int(gen.integers(0, max_per_lane + 1))):
            kind = kinds[int(gen.integers(0, len(kinds)))]
            x += kind.length / 2.0 + float(gen.uniform(0.5, 80.0))
            if x + kind.length / 2.0 > road_length:
                break
            cells.append(VehicleState(
                kind=kind,
                x=x,
                v=float(gen.uniform(0.0, kind.v_max)),
                s=float(gen.uniform(kind.s_min, kind.s_max)),
                d=_DIRECTIONS[int(gen.integers(0, 3))],
                vid=vid,
            ))
            vid += 1
            x += kind.length / 2.0
        new_lanes.append(lane.with_cells(cells))
    return RoadConfiguration(tuple(new_lanes))


def check_meta_equivalence(cases: int = 1000, seed: int = SEED, max_per_lane: int = 20,
                           kinds_file: str = KINDS_FILE, rules_file: str = RULES_FILE) -> bool:
    """元自动机 2M 次 Δ* 与逐车道算法在随机配置上逐位相同"""
    kinds = list(load_kinds(kinds_file).values())
    settings = DynamicsSettings(rule_base=load_rule_base(rules_file))
    gen = np.random.default_rng(seed)
    mismatches = 0
    for case in range(cases):
        lanes = int(gen.choice([2, 3, 4]))
        road = random_road(gen, kinds, lanes, max_per_lane)
        t = int(gen.integers(1, 1000))
        blockers = Blockers(stop_line=2000.0, radius=50.0) if case % 2 else Blockers.open_road()
        expected = update_multilane(road, blockers, KeyedRNG(seed, case), t, settings)
        actual = meta_cca_step(road, blockers, KeyedRNG(seed, case), t, settings)
        if expected != actual:
            mismatches += 1
            logger.error(f"❌ 第 {case} 组 (M={lanes}) 两种更新结果不一致")
    if mismatches:
        logger.error(f"❌ 元自动机等价性: {mismatches}/{cases} 组不一致")
        return False
    logger.info(f"✅ 元自动机等价性: {cases} 组全部一致")
    return True


def check_gwaf_symmetry(cases: int = 1000, seed: int = SEED, tolerance: float = 1e-12) -> bool:
    """对称三角形输出时 GWAF 退化为峰值的加权平均；单条规则 w=1 时等于峰值"""
    gen = np.random.default_rng(seed)
    for case in range(cases):
        fired = []
        numerator = denominator = 0.0
        for _ in range(int(gen.integers(1, 8))):
            peak = float(gen.uniform(-5.0, 5.0))
            half = float(gen.uniform(0.1, 3.0))
            w = float(gen.uniform(0.01, 1.0))
            mf = MembershipFunction.triangular(peak - half, peak, peak + half)
            fired.append((w, preimage(mf, w)))
            numerator += w * peak
            denominator += w
        expected = numerator / denominator
        actual = gwaf(fired)
        if abs(actual - expected) > tolerance * max(1.0, abs(expected)):
            logger.error(f"❌ GWAF 第 {case} 组: {actual} != {expected}")
            return False
        peak = float(gen.uniform(-5.0, 5.0))
        single = gwaf([(1.0, preimage(MembershipFunction.triangular(peak - 1.0, peak, peak + 2.0), 1.0))])
        if single != peak:
            logger.error(f"❌ GWAF 单规则 w=1: {single} != {peak}")
            return False
    logger.info(f"✅ GWAF 对称性: {cases} 组全部通过")
    return True


def nasch_reference(positions: List[float], speeds: List[float], lengths: List[float],
                    v_max: float, acceleration: float, steps: int) -> List[List[float]]:
    """连续空间确定性 NaSch 的独立实现 (开放边界)，返回每步的速度"""
    x = list(positions)
    v = list(speeds)
    trace = []
    for _ in range(steps):
        gaps = []
        for i in range(len(x)):
            if i + 1 < len(x):
                gaps.append((x[i + 1] - lengths[i + 1] / 2) - (x[i] + lengths[i] / 2))
            else:
                gaps.append(math.inf)
        v = [min(v_max, gaps[i], v[i] + acceleration) for i in range(len(x))]
        x = [x[i] + v[i] for i in range(len(x))]
        trace.append(v)
    return trace


def check_nasch_reduction(steps: int = 200, vehicles: int = 10,
                          kinds_file: str = KINDS_FILE, rules_file: str = RULES_FILE) -> bool:
    """常加速度 7.5 且无噪声时，单车道演化与 NaSch 逐步一致"""
    kind = load_kinds(kinds_file)["passenger"]
    settings = DynamicsSettings(rule_base=load_rule_base(rules_file), noise_enabled=False,
                                accel_override=NASCH_ACCELERATION)
    positions = [10.0 + 12.0 * i for i in range(vehicles)]
    speeds = [float(i % 4) for i in range(vehicles)]
    lane = LaneConfiguration(tuple(
        VehicleState(kind=kind, x=x, v=v, vid=i) for i, (x, v) in enumerate(zip(positions, speeds))
    ), left_exists=False, right_exists=True)
    reference = nasch_reference(positions, speeds, [kind.length] * vehicles, kind.v_max,
                                NASCH_ACCELERATION, steps)
    rng = KeyedRNG(SEED)
    for t in range(steps):
        lane = step_lane(lane, Blockers.open_road(), rng, t + 1, settings)
        actual = [cell.v for cell in lane]
        if actual != reference[t]:
            logger.error(f"❌ NaSch 退化在 t={t + 1} 不一致: {actual} != {reference[t]}")
            return False
    logger.info(f"✅ NaSch 退化: {steps} 步速度完全一致")
    return True


def _ensemble(results) -> List[list]:
    return [r.samples for r in results]


def _peak(cfg: ExperimentConfig, workers: int) -> float:
    return peak_flow(fundamental_diagram(_ensemble(run(cfg, workers)), lanes=cfg.lanes))


def check_free_flow_slope(cfg: ExperimentConfig, workers: int = 1,
                          tolerance: float = FREE_FLOW_SLOPE_TOLERANCE,
                          max_density: float = FREE_FLOW_MAX_DENSITY) -> bool:
    """低密度段 q-D 斜率应接近乘用车的最优速度 v_opt"""
    kinds, _ = cfg.resolve()
    v_opt = kinds[cfg.passenger_kind].v_opt
    slope = free_flow_slope(_ensemble(run(cfg, workers)), max_density, cfg.lanes)
    if math.isnan(slope) or abs(slope - v_opt) > tolerance * v_opt:
        logger.error(f"❌ 自由流斜率 {slope:.2f} m/s 超出 {v_opt:g} ± {tolerance:.0%}")
        return False
    logger.info(f"✅ 自由流斜率 {slope:.2f} m/s (v_opt = {v_opt:g})")
    return True


def check_three_phase(cfg: ExperimentConfig, workers: int = 1) -> bool:
    """cc(t): 加载阶段接近 1，中段存在 |cc| < 0.2 的连续窗口，饱和段为负"""
    cc_table = cross_covariance(_ensemble(run(cfg, workers)))
    signature = phase_signature(cc_table, cfg.iterations)
    failures = []
    if not signature.loading_cc > LOADING_MIN_CC:
        failures.append(f"加载阶段 cc={signature.loading_cc:.3f} <= {LOADING_MIN_CC}")
    if signature.synchronized_run < SYNCHRONIZED_MIN_RUN:
        failures.append(f"同步流窗口只有 {signature.synchronized_run} 秒")
    if not signature.tail_cc < 0:
        failures.append(f"饱和段 cc={signature.tail_cc:.3f} 不为负")
    if failures:
        logger.error(f"❌ 三相特征不成立 [{cfg.name}]: {'; '.join(failures)}")
        return False
    logger.info(f"✅ 三相特征 [{cfg.name}]: {signature}")
    return True


def check_obstacle_drop(cfg: ExperimentConfig, workers: int = 1,
                        min_drop: float = OBSTACLE_MIN_DROP) -> bool:
    """有障碍物时的峰值分箱流量至少比无障碍物时低 min_drop"""
    if cfg.obstacle == "none":
        raise ConfigError("障碍物检查需要 obstacle 为 left 或 right")
    with_obstacle = _peak(cfg, workers)
    without = _peak(replace(cfg, name=f"{cfg.name}_none", obstacle="none"), workers)
    if not with_obstacle <= (1.0 - min_drop) * without:
        logger.error(f"❌ 障碍物峰值流量 {with_obstacle:.4f} 未比无障碍物 {without:.4f} 低 {min_drop:.0%}")
        return False
    logger.info(f"✅ 障碍物使峰值流量从 {without:.4f} 降到 {with_obstacle:.4f} 辆/秒/车道")
    return True


def check_heterogeneity(cfg: ExperimentConfig, fractions: Sequence[float] = HETEROGENEITY_FRACTIONS,
                        workers: int = 1) -> bool:
    """长车比例 p 增大时峰值分箱流量不增加"""
    peaks = [_peak(replace(cfg, name=f"{cfg.name}_p{p:g}", long_fraction=float(p)), workers)
             for p in fractions]
    for i in range(1, len(peaks)):
        if peaks[i] > peaks[i - 1]:
            logger.error(f"❌ 峰值流量随长车比例上升: p={fractions[i - 1]:g} → {peaks[i - 1]:.4f}, "
                         f"p={fractions[i]:g} → {peaks[i]:.4f}")
            return False
    logger.info(f"✅ 峰值流量随长车比例不增加: {dict(zip(fractions, [round(q, 4) for q in peaks]))}")
    return True


def _output_files(path: str) -> List[str]:
    return sorted(os.listdir(path))


def check_determinism(cfg: ExperimentConfig, workers: int = 2) -> bool:
    """同一配置顺序执行和并行执行的输出文件逐字节相同"""
    with tempfile.TemporaryDirectory() as tmp:
        sequential = os.path.join(tmp, "sequential")
        parallel = os.path.join(tmp, "parallel")
        emit_outputs(run(cfg, workers=1), sequential, cfg.lanes)
        emit_outputs(run(cfg, workers=workers), parallel, cfg.lanes)
        names = _output_files(sequential)
        if names != _output_files(parallel):
            logger.error("❌ 顺序与并行执行产生的文件列表不同")
            return False
        _, mismatch, errors = filecmp.cmpfiles(sequential, parallel, names, shallow=False)
        if mismatch or errors:
            logger.error(f"❌ 顺序与并行执行结果不同: {mismatch + errors}")
            return False
    logger.info(f"✅ 确定性: [{cfg.name}] 顺序与 {workers} 进程并行输出逐字节相同")
    return True


def sampled_sweep(base: ExperimentConfig, count: int = DETERMINISM_SWEEP_CONFIGS) -> List[ExperimentConfig]:
    """从扫参网格中等间隔抽取 count 个配置"""
    grid = sweep_configs(base)
    if count >= len(grid):
        return grid
    return [grid[i * len(grid) // count] for i in range(count)]


def check_sweep_determinism(configs: Sequence[ExperimentConfig], workers: int = 2) -> bool:
    failed = [cfg.name for cfg in configs if not check_determinism(cfg, workers)]
    if failed:
        logger.error(f"❌ 确定性: {len(failed)}/{len(configs)} 个配置不一致: {failed}")
        return False
    logger.info(f"✅ 确定性: {len(configs)} 个扫参配置全部一致")
    return True


def _acceptance_config(name: str, iterations: int, repetitions: int) -> ExperimentConfig:
    cfg = load_experiment(os.path.join(CONFIG_DIR, f"{name}.json"))
    return replace(cfg, iterations=iterations, repetitions=repetitions)


def default_suites(cases: int = 1000, repetitions: int = 20, iterations: int = 1000,
                   workers: int = 2) -> Dict[str, Callable[[], bool]]:
    """verify 子命令运行的检查项；验收实验读取 configs/ 下的同名配置"""
    collision_cfg = ExperimentConfig(name="collision", emission_rate=2.0, lanes=3, influence_radius=10.0,
                                     iterations=iterations, repetitions=repetitions)
    determinism_base = replace(collision_cfg, repetitions=max(2, workers),
                               iterations=min(iterations, DETERMINISM_ITERATIONS))
    return {
        "collision_freedom": lambda: check_collision_freedom(collision_cfg),
        "meta_equivalence": lambda: check_meta_equivalence(cases),
        "gwaf_symmetry": lambda: check_gwaf_symmetry(cases),
        "nasch_reduction": lambda: check_nasch_reduction(),
        "free_flow_slope": lambda: check_free_flow_slope(
            _acceptance_config("free_flow", iterations, repetitions), workers),
        "three_phase": lambda: check_three_phase(
            _acceptance_config("three_phase", iterations, max(repetitions, THREE_PHASE_REPETITIONS)), workers),
        "obstacle_drop": lambda: check_obstacle_drop(
            _acceptance_config("obstacle_right", iterations, repetitions), workers),
        "heterogeneity": lambda: check_heterogeneity(
            _acceptance_config("heterogeneity", iterations, repetitions), workers=workers),
        "determinism": lambda: check_sweep_determinism(sampled_sweep(determinism_base), workers),
    }


def run_suites(suites: Dict[str, Callable[[], bool]], only: Optional[List[str]] = None) -> Dict[str, bool]:
    results = {}
    for name, suite in suites.items():
        if only and name not in only:
            continue
        logger.info(f"🔍 运行检查: {name}")
        try:
            results[name] = bool(suite())
        except Exception as e:
            logger.error(f"❌ 检查 {name} 异常: {e}", exc_info=True)
            results[name] = False
    passed = sum(results.values())
    logger.info(f"📊 检查结果: {passed}/{len(results)} 通过")
    return results
