import itertools
import json
import logging
import math
import multiprocessing as mp
import os
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Any, Dict, List, Optional, Sequence, Tuple

from config import (
    CAPTURE_DISTANCE,
    CAPTURE_SPEED,
    EMISSION_RATE,
    INFLUENCE_RADIUS,
    ITERATIONS,
    KINDS_FILE,
    LANES,
    LONG_FRACTION,
    LONG_KIND,
    OBSTACLE,
    OBSTACLE_FRACTION,
    OBSTACLE_VID,
    OPEN_TOLLING,
    PASSENGER_KIND,
    PROGRESS_LOG_INTERVAL,
    REPETITIONS,
    RULES_FILE,
    ROAD_LENGTH,
    SEED,
    SWEEP_EMISSION_RATES,
    SWEEP_INFLUENCE_RADII,
    SWEEP_LONG_FRACTIONS,
    SWEEP_OBSTACLES,
)
from analysis import MetricsRecorder
from errors import ConfigError, DomainError
from fuzzy_engine import RuleBase, load_rule_base
from lane_dynamics import DynamicsSettings
from multilane import RoadConfiguration, front_gap_threshold, update_multilane
from random_streams import KeyedRNG
from vehicle_model import Blockers, Kind, VehicleState, insert_at, load_kinds, obstacle_kind

logger = logging.getLogger(__name__)

OBSTACLE_CHOICES = ("none", "left", "right")
ENTRY_SPEED_FACTOR = 0.95


@dataclass(frozen=True)
class ExperimentConfig:
    """一次实验的全部参数，未给出的字段取 config.py 的默认值

    influence_radius = -1 表示开放式收费 (不减速不停车)。
    kinds 为空时从 kinds_file 读取车种。
    """

    name: str = "default"
    road_length: float = ROAD_LENGTH
    lanes: int = LANES
    iterations: int = ITERATIONS
    repetitions: int = REPETITIONS
    emission_rate: float = EMISSION_RATE
    long_fraction: float = LONG_FRACTION
    influence_radius: float = INFLUENCE_RADIUS
    obstacle: str = OBSTACLE
    seed: int = SEED
    noise_enabled: bool = True
    desire_from_updated_stress: bool = True
    accel_override: Optional[float] = None
    passenger_kind: str = PASSENGER_KIND
    long_kind: str = LONG_KIND
    kinds_file: str = KINDS_FILE
    rules_file: str = RULES_FILE
    kinds: Tuple[Dict[str, Any], ...] = field(default=())

    @property
    def open_tolling(self) -> bool:
        return self.influence_radius == OPEN_TOLLING

    def validate(self) -> "ExperimentConfig":
        """检查参数取值，失败时抛出 ConfigError"""
        if not self.road_length > 0:
            raise ConfigError(f"路段长度必须为正: {self.road_length}")
        if self.lanes < 2:
            raise ConfigError(f"车道数至少为 2: {self.lanes}")
        if self.iterations < 0:
            raise ConfigError(f"迭代步数不能为负: {self.iterations}")
        if self.repetitions < 1:
            raise ConfigError(f"重复次数至少为 1: {self.repetitions}")
        if not self.emission_rate >= 0:
            raise ConfigError(f"发车率不能为负: {self.emission_rate}")
        if not 0.0 <= self.long_fraction <= 1.0:
            raise ConfigError(f"长车比例必须在 [0,1] 内: {self.long_fraction}")
        if not (self.influence_radius > 0 or self.open_tolling):
            raise ConfigError(f"影响半径必须为正或为 {OPEN_TOLLING} (开放式收费): {self.influence_radius}")
        if self.obstacle not in OBSTACLE_CHOICES:
            raise ConfigError(f"障碍物位置必须是 {OBSTACLE_CHOICES} 之一: {self.obstacle}")
        if not 0 <= self.seed < 2 ** 64:
            raise ConfigError(f"随机种子必须是 64 位非负整数: {self.seed}")
        kinds, rule_base = self.resolve()
        needed = [self.passenger_kind] + ([self.long_kind] if self.long_fraction > 0 else [])
        for kind_id in needed:
            if kind_id not in kinds:
                raise ConfigError(f"车种 {kind_id} 不存在，可用: {list(kinds)}")
            try:
                rule_base.validate(kinds[kind_id].memberships, owner=kind_id)
            except DomainError as e:
                raise ConfigError(str(e)) from None
        return self

    def resolve(self) -> Tuple[Dict[str, Kind], RuleBase]:
        """读取车种和规则库"""
        try:
            if self.kinds:
                kinds = {}
                for entry in self.kinds:
                    kind = Kind.from_dict(entry)
                    kinds[kind.id] = kind
            else:
                kinds = load_kinds(self.kinds_file)
            rule_base = load_rule_base(self.rules_file)
        except OSError as e:
            raise ConfigError(f"无法读取车种或规则文件: {e}") from None
        except (KeyError, TypeError, json.JSONDecodeError, DomainError) as e:
            raise ConfigError(f"车种或规则文件格式错误: {e}") from None
        return kinds, rule_base

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["kinds"] = list(self.kinds)
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"未知的实验参数: {unknown}")
        values = dict(data)
        if "kinds" in values:
            values["kinds"] = tuple(values["kinds"])
        try:
            cfg = cls(**values)
            return replace(
                cfg,
                road_length=float(cfg.road_length),
                lanes=int(cfg.lanes),
                iterations=int(cfg.iterations),
                repetitions=int(cfg.repetitions),
                emission_rate=float(cfg.emission_rate),
                long_fraction=float(cfg.long_fraction),
                influence_radius=float(cfg.influence_radius),
                seed=int(cfg.seed),
            )
        except (TypeError, ValueError) as e:
            raise ConfigError(f"实验参数类型错误: {e}") from None


def load_experiment(path: str) -> ExperimentConfig:
    """读取实验文件 (JSON)，相对路径的车种/规则文件以实验文件所在目录为基准"""
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except OSError as e:
        raise ConfigError(f"无法读取实验文件 {path}: {e}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"实验文件 {path} 不是合法的 JSON: {e}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"实验文件 {path} 顶层必须是对象")
    base = os.path.dirname(os.path.abspath(path))
    for key in ("kinds_file", "rules_file"):
        if key in data and not os.path.isabs(data[key]):
            data[key] = os.path.normpath(os.path.join(base, data[key]))
    data.setdefault("name", os.path.splitext(os.path.basename(path))[0])
    return ExperimentConfig.from_dict(data)


def save_experiment(cfg: ExperimentConfig, path: str) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(cfg.to_dict(), f, indent=2, ensure_ascii=False)
        f.write("\n")


@dataclass(frozen=True)
class Obstacle:
    """障碍物: 长度 2L/5，位于路段中央"""

    lane: int
    start: float
    end: float

    @property
    def length(self) -> float:
        return self.end - self.start

    @property
    def midpoint(self) -> float:
        return (self.start + self.end) / 2.0


def obstacle_for(cfg: ExperimentConfig) -> Optional[Obstacle]:
    if cfg.obstacle == "none":
        return None
    lane = 0 if cfg.obstacle == "left" else cfg.lanes - 1
    half = OBSTACLE_FRACTION * cfg.road_length / 2.0
    middle = cfg.road_length / 2.0
    return Obstacle(lane, middle - half, middle + half)


def obstacle_install(road: RoadConfiguration, cfg: ExperimentConfig) -> RoadConfiguration:
    """把障碍物作为一辆永久静止的车辆插入指定车道"""
    obstacle = obstacle_for(cfg)
    if obstacle is None:
        return road
    body = VehicleState(kind=obstacle_kind(obstacle.length), x=obstacle.midpoint, v=0.0, vid=OBSTACLE_VID)
    lane = road.lanes[obstacle.lane]
    position = sum(1 for cell in lane if cell.x < body.x)
    logger.info(f"🚧 障碍物位于车道 {obstacle.lane}: [{obstacle.start:.0f}, {obstacle.end:.0f}] 米")
    return road.with_lane(obstacle.lane, insert_at(position, body, lane))


def emission_probability(emission_rate: float, lanes: int) -> float:
    """每条车道每秒至少到达一辆车的概率 1 - e^{-λ/M}"""
    return 1.0 - math.exp(-emission_rate / lanes)


def entry_speed(kind: Kind, front_gap: float, v_front: float) -> Optional[float]:
    """入口速度: 不超过 v_opt，且满足与前车的安全间距；无法满足时返回 None"""
    if math.isinf(front_gap):
        return kind.v_opt
    base = front_gap + v_front - 3.0
    if base <= 0.0:
        return None
    v = min(kind.v_opt, ENTRY_SPEED_FACTOR * base ** 0.8)
    if not front_gap > front_gap_threshold(v, v_front):
        return None
    return v


@dataclass(frozen=True)
class Emission:
    road: RoadConfiguration
    arrivals: int
    dropped: int
    next_vid: int


def emit(t: int, road: RoadConfiguration, cfg: ExperimentConfig, rng: KeyedRNG,
         kinds: Dict[str, Kind], next_vid: int) -> Emission:
    """入口发车: 每条车道独立做一次伯努利试验，车头与入口对齐 (x = l/2)

    到达但无法安全插入的车辆直接丢弃。
    """
    p_emit = emission_probability(cfg.emission_rate, cfg.lanes)
    arrivals = dropped = 0
    for j, lane in enumerate(road.lanes):
        if not rng.bernoulli(t, j, "emit", p_emit):
            continue
        arrivals += 1
        is_long = rng.bernoulli(t, j, "kind", cfg.long_fraction)
        kind = kinds[cfg.long_kind if is_long else cfg.passenger_kind]
        x = kind.length / 2.0
        if len(lane) and lane[0].x <= x:
            dropped += 1
            continue
        if len(lane):
            front_gap, v_front = lane[0].rear - kind.length, lane[0].v
        else:
            front_gap, v_front = math.inf, 0.0
        v = entry_speed(kind, front_gap, v_front)
        if v is None:
            dropped += 1
            continue
        vehicle = VehicleState(kind=kind, x=x, v=v, vid=next_vid, entry_time=float(t))
        road = road.with_lane(j, insert_at(0, vehicle, lane))
        next_vid += 1
    return Emission(road, arrivals, dropped, next_vid)


@dataclass(frozen=True)
class ExitEvent:
    vid: int
    lane: int
    kind: str
    entry_time: float
    exit_time: float

    @property
    def latency(self) -> float:
        return self.exit_time - self.entry_time


class TollPlaza:
    """路段终点的收费站

    影响半径 ρ > 0: 停止线前 ρ 米内的车辆感知到静止虚拟车，
    车头距停止线 2 米内且速度低于 0.5 m/s 时开始服务，服务时间结束后驶离。
    开放式收费: 车尾越过终点即驶离，不减速。
    """

    def __init__(self, road_length: float, influence_radius: float):
        self.road_length = road_length
        self.influence_radius = influence_radius
        self.open = influence_radius == OPEN_TOLLING
        self._captured: Dict[int, int] = {}

    def blockers(self) -> Blockers:
        if self.open:
            return Blockers.open_road()
        return Blockers(stop_line=self.road_length, radius=self.influence_radius)

    def _done(self, cell: VehicleState, t: int) -> bool:
        if self.open:
            return cell.rear > self.road_length
        at_booth = self.road_length - cell.front <= CAPTURE_DISTANCE and cell.v < CAPTURE_SPEED
        if not at_booth:
            self._captured.pop(cell.vid, None)
            return False
        since = self._captured.setdefault(cell.vid, t)
        return t - since >= cell.kind.service_time

    def process(self, road: RoadConfiguration, t: int) -> Tuple[RoadConfiguration, List[ExitEvent]]:
        exits: List[ExitEvent] = []
        lanes = []
        for j, lane in enumerate(road.lanes):
            kept = []
            for cell in lane:
                if not cell.kind.is_obstacle and self._done(cell, t):
                    self._captured.pop(cell.vid, None)
                    exits.append(ExitEvent(cell.vid, j, cell.kind.id, cell.entry_time, float(t)))
                else:
                    kept.append(cell)
            lanes.append(lane if len(kept) == len(lane) else lane.with_cells(kept))
        return RoadConfiguration(tuple(lanes)), exits


def plaza_blockers(cfg: ExperimentConfig) -> Blockers:
    return TollPlaza(cfg.road_length, cfg.influence_radius).blockers()


@dataclass
class RepetitionResult:
    """一次重复实验的结果: 时间序列和车辆计数"""

    repetition: int
    samples: list
    emitted: int = 0
    dropped: int = 0
    processed: int = 0
    in_road: int = 0

    @property
    def balanced(self) -> bool:
        return self.processed + self.in_road + self.dropped == self.emitted


class TrafficSimulation:
    """一次重复实验的运行状态"""

    def __init__(self, cfg: ExperimentConfig, repetition: int,
                 kinds: Dict[str, Kind], rule_base: RuleBase):
        self.cfg = cfg
        self.repetition = repetition
        self.kinds = kinds
        self.rng = KeyedRNG(cfg.seed, repetition)
        self.settings = DynamicsSettings(
            rule_base=rule_base,
            noise_enabled=cfg.noise_enabled,
            accel_override=cfg.accel_override,
            desire_from_updated_stress=cfg.desire_from_updated_stress,
        )
        self.plaza = TollPlaza(cfg.road_length, cfg.influence_radius)
        self.blockers = self.plaza.blockers()
        self.road = obstacle_install(RoadConfiguration.empty(cfg.lanes), cfg)
        self.recorder = MetricsRecorder(cfg.road_length)
        self.next_vid = 0
        self.emitted = 0
        self.dropped = 0
        self.processed = 0

    def step(self, t: int):
        emission = emit(t, self.road, self.cfg, self.rng, self.kinds, self.next_vid)
        self.emitted += emission.arrivals
        self.dropped += emission.dropped
        self.next_vid = emission.next_vid
        self.road = update_multilane(emission.road, self.blockers, self.rng, t, self.settings)
        self.road, exits = self.plaza.process(self.road, t)
        self.processed += len(exits)
        return self.recorder.record(self.road, exits, t)

    def in_road(self) -> int:
        return sum(1 for _, cell in self.road.vehicles() if not cell.kind.is_obstacle)

    def run(self) -> RepetitionResult:
        samples = []
        for t in range(1, self.cfg.iterations + 1):
            samples.append(self.step(t))
            if t % PROGRESS_LOG_INTERVAL == 0:
                logger.debug(f"重复 {self.repetition} t={t}: 在途 {self.in_road()} 辆, 已处理 {self.processed} 辆")
        return RepetitionResult(
            repetition=self.repetition,
            samples=samples,
            emitted=self.emitted,
            dropped=self.dropped,
            processed=self.processed,
            in_road=self.in_road(),
        )


def run_repetition(cfg: ExperimentConfig, repetition: int) -> RepetitionResult:
    kinds, rule_base = cfg.resolve()
    logger.info(f"🚀 [{cfg.name}] 重复 {repetition} 开始 (λ={cfg.emission_rate}, p={cfg.long_fraction}, "
                f"ρ={cfg.influence_radius}, 障碍物={cfg.obstacle}, M={cfg.lanes})")
    result = TrafficSimulation(cfg, repetition, kinds, rule_base).run()
    if not result.balanced:
        logger.warning(f"⚠️ 重复 {repetition} 车辆计数不平衡: {result}")
    logger.info(f"✅ [{cfg.name}] 重复 {repetition} 完成: 发车 {result.emitted}, 丢弃 {result.dropped}, "
                f"处理 {result.processed}, 在途 {result.in_road}")
    return result


def _run_task(task: Tuple[ExperimentConfig, int]) -> RepetitionResult:
    cfg, repetition = task
    return run_repetition(cfg, repetition)


def run(cfg: ExperimentConfig, workers: int = 1) -> List[RepetitionResult]:
    """运行全部重复实验；workers > 1 时用 spawn 进程池并行，结果与顺序执行一致"""
    cfg.validate()
    tasks = [(cfg, r) for r in range(cfg.repetitions)]
    if workers > 1 and len(tasks) > 1:
        logger.info(f"⚙️ 使用 {workers} 个进程并行运行 {len(tasks)} 次重复实验")
        with mp.get_context("spawn").Pool(processes=workers) as pool:
            results = pool.map(_run_task, tasks)
    else:
        results = [_run_task(task) for task in tasks]
    return sorted(results, key=lambda r: r.repetition)


def sweep_name(cfg: ExperimentConfig) -> str:
    rho = "open" if cfg.open_tolling else f"{cfg.influence_radius:g}"
    return (f"lam{cfg.emission_rate:g}_p{cfg.long_fraction:g}_rho{rho}"
            f"_obs{cfg.obstacle}_M{cfg.lanes}")


def sweep_configs(base: ExperimentConfig,
                  emission_rates: Sequence[float] = SWEEP_EMISSION_RATES,
                  long_fractions: Sequence[float] = SWEEP_LONG_FRACTIONS,
                  influence_radii: Sequence[float] = SWEEP_INFLUENCE_RADII,
                  obstacles: Sequence[str] = SWEEP_OBSTACLES,
                  lanes: Sequence[int] = (LANES,)) -> List[ExperimentConfig]:
    """扫参: λ × p × ρ × 障碍物 × 车道数 的笛卡尔积"""
    configs = []
    for lam, p, rho, obstacle, m in itertools.product(
            emission_rates, long_fractions, influence_radii, obstacles, lanes):
        cfg = replace(base, emission_rate=float(lam), long_fraction=float(p),
                      influence_radius=float(rho), obstacle=obstacle, lanes=int(m))
        configs.append(replace(cfg, name=sweep_name(cfg)))
    return configs
