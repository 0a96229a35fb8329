import bisect
import logging
from collections import Counter
from dataclasses import dataclass, replace
from typing import Iterator, List, Optional, Sequence, Tuple

from config import STRESS_TRANSFER_DIVISOR
from errors import DomainError, InvariantViolation, NonPhysicalError
from lane_dynamics import DynamicsSettings, step_lane
from random_streams import KeyedRNG
from vehicle_model import (
    Blockers,
    Direction,
    LaneConfiguration,
    VehicleState,
    index_of,
    insert_at,
    delete_at,
)

logger = logging.getLogger(__name__)

COPY = "copy"
ERASE = "erase"


@dataclass(frozen=True)
class RoadConfiguration:
    """M 条车道，下标 0 为最左侧车道"""

    lanes: Tuple[LaneConfiguration, ...]

    def __post_init__(self):
        if len(self.lanes) < 2:
            raise DomainError(f"多车道模型至少需要 2 条车道: {len(self.lanes)}")

    @classmethod
    def empty(cls, lanes: int) -> "RoadConfiguration":
        if lanes < 2:
            raise DomainError(f"多车道模型至少需要 2 条车道: {lanes}")
        return cls(tuple(
            LaneConfiguration((), left_exists=i > 0, right_exists=i < lanes - 1)
            for i in range(lanes)
        ))

    @property
    def M(self) -> int:
        return len(self.lanes)

    def with_lane(self, i: int, lane: LaneConfiguration) -> "RoadConfiguration":
        lanes = list(self.lanes)
        lanes[i] = lane
        return RoadConfiguration(tuple(lanes))

    def vehicles(self) -> Iterator[Tuple[int, VehicleState]]:
        for i, lane in enumerate(self.lanes):
            for cell in lane:
                yield i, cell


def sigma_cp(sigma: VehicleState) -> VehicleState:
    """转移副本: 压力除以 5，d′ 记为来源一侧"""
    if sigma.d is Direction.NONE or sigma.d_prime is not Direction.NONE:
        raise DomainError(f"车辆 {sigma.vid} 不满足复制条件: d={sigma.d.value}, d′={sigma.d_prime.value}")
    return replace(sigma, s=sigma.s / STRESS_TRANSFER_DIVISOR, d_prime=sigma.d.opposite)


def back_gap_threshold(v_back: float, v: float) -> float:
    """与目标车道后车的最小间距 max(0, v_{j-1}^1.2 - v + |v_{j-1} - v| + 3)"""
    return max(0.0, v_back ** 1.2 - v + abs(v_back - v) + 3.0)


def front_gap_threshold(v: float, v_front: float) -> float:
    """与目标车道前车的最小间距 max(0, v^1.25 - v_j + 3)"""
    return max(0.0, v ** 1.25 - v_front + 3.0)


def trans_check(sigma: VehicleState, target: LaneConfiguration, direction: Direction) -> bool:
    """σ 能否安全地转移到目标车道"""
    if sigma.kind.is_obstacle:
        return False
    if sigma.d is not direction or sigma.d_prime is not Direction.NONE:
        return False
    try:
        j = index_of(sigma, target)
    except NonPhysicalError:
        return False
    if j > 0:
        back = target[j - 1]
        if not sigma.rear - back.front > back_gap_threshold(back.v, sigma.v):
            return False
    if j < len(target):
        ahead = target[j]
        if not ahead.rear - sigma.front > front_gap_threshold(sigma.v, ahead.v):
            return False
    return True


def copy_into(sigma: VehicleState, target: LaneConfiguration, direction: Direction) -> LaneConfiguration:
    """σ ↣_X c: 满足条件时插入副本，否则原样返回"""
    if not trans_check(sigma, target, direction):
        return target
    return insert_at(index_of(sigma, target), sigma_cp(sigma), target)


def _is_source_of(cell: VehicleState, omega: VehicleState) -> bool:
    return (
        cell.kind is omega.kind
        and cell.x == omega.x
        and cell.v == omega.v
        and cell.s / STRESS_TRANSFER_DIVISOR == omega.s
        and cell.d is omega.d
        and cell.d_prime is Direction.NONE
    )


def erase_from(source: LaneConfiguration, omega: VehicleState) -> LaneConfiguration:
    """c′ \\ ω: 删除来源车道中与副本 ω 对应的原车辆，没有匹配时原样返回"""
    if omega.d is Direction.NONE or omega.d_prime is not omega.d.opposite:
        return source
    xs = [cell.x for cell in source]
    i = bisect.bisect_left(xs, omega.x)
    if i < len(xs) and _is_source_of(source[i], omega):
        return delete_at(i, source)
    return source


def copy_config(source: LaneConfiguration, target: LaneConfiguration,
                direction: Direction) -> LaneConfiguration:
    """c′ ↣_X c: 按位置升序把来源车道的每辆车依次复制到目标车道"""
    for sigma in source:
        target = copy_into(sigma, target, direction)
    return target


def erase_config(source: LaneConfiguration, target: LaneConfiguration) -> LaneConfiguration:
    """c′ \\ c: 按位置升序删除已被复制到目标车道的原车辆"""
    for omega in target:
        source = erase_from(source, omega)
    return source


def duplicate_vids(road: RoadConfiguration) -> List[int]:
    counts = Counter(cell.vid for _, cell in road.vehicles())
    return sorted(vid for vid, n in counts.items() if n > 1)


def _check_unique(road: RoadConfiguration, t: int) -> RoadConfiguration:
    duplicates = duplicate_vids(road)
    if duplicates:
        logger.error(f"❌ t={t} 车辆同时出现在两条车道: {duplicates[:10]}")
        raise InvariantViolation(f"t={t} 车辆编号重复: {duplicates[:10]}")
    return road


def update_multilane(road: RoadConfiguration, blockers: Blockers, rng: KeyedRNG, t: int,
                     settings: DynamicsSettings) -> RoadConfiguration:
    """多车道模型的一步 (1 秒)

    从左到右依次处理: 先复制到相邻车道再从本车道删除，
    左侧车道不再被后续步骤改动后立即用 δ* 演化。
    每条车道按自身的 (𝓛, 𝓡) 演化，M=2 时最左车道也用 (0,1)。
    """
    lanes = list(road.lanes)
    M = len(lanes)
    left, right = Direction.LEFT, Direction.RIGHT

    def evolve(i: int):
        lanes[i] = step_lane(lanes[i], blockers, rng, t, settings)

    for i in range(M):
        if i == 0:
            lanes[1] = copy_config(lanes[0], lanes[1], right)
            lanes[0] = erase_config(lanes[0], lanes[1])
        if 0 < i < M - 1:
            lanes[i - 1] = copy_config(lanes[i], lanes[i - 1], left)
            lanes[i] = erase_config(lanes[i], lanes[i - 1])
            lanes[i + 1] = copy_config(lanes[i], lanes[i + 1], right)
            lanes[i] = erase_config(lanes[i], lanes[i + 1])
            evolve(i - 1)
        if i == M - 1:
            lanes[M - 2] = copy_config(lanes[M - 1], lanes[M - 2], left)
            lanes[M - 1] = erase_config(lanes[M - 1], lanes[M - 2])
            evolve(M - 2)
            evolve(M - 1)

    return _check_unique(RoadConfiguration(tuple(lanes)), t)


@dataclass(frozen=True)
class OmegaCell:
    """元自动机的一个元胞: (车道配置, 阶段, 车道数, 车道下标, 计数器)"""

    lane: LaneConfiguration
    mode: str
    M: int
    P: int
    K: int


def delta(left: Optional[OmegaCell], cell: Optional[OmegaCell], right: Optional[OmegaCell],
          blockers: Blockers, rng: KeyedRNG, t: int, settings: DynamicsSettings) -> Optional[OmegaCell]:
    """元自动机的局部转移函数 Δ(ω₋₁, ω₀, ω₁)

    ω₋₁ 是左侧车道，ω₁ 是右侧车道；None 表示没有车道。
    """
    if cell is None:
        return None
    lane, mode, M, P, K = cell.lane, cell.mode, cell.M, cell.P, cell.K

    if K == 0:
        if mode == COPY:
            if P == K + 1:
                lane = copy_config(left.lane, lane, Direction.RIGHT)
            mode = ERASE
        else:
            if P == K:
                lane = erase_config(lane, right.lane)
            return OmegaCell(lane, COPY, M, P, (K + 1) % M)

    if 0 < K < M - 1:
        if mode == COPY:
            if P == K - 1:
                lane = copy_config(right.lane, lane, Direction.LEFT)
            if P == K + 1:
                lane = copy_config(left.lane, lane, Direction.RIGHT)
            mode = ERASE
        else:
            if P == K:
                lane = erase_config(lane, left.lane)
                lane = erase_config(lane, right.lane)
            return OmegaCell(lane, COPY, M, P, (K + 1) % M)

    if K == M - 1:
        if mode == COPY:
            if P == K - 1:
                lane = copy_config(right.lane, lane, Direction.LEFT)
            mode = ERASE
        else:
            if P == K:
                lane = erase_config(lane, left.lane)
            # 每条车道的 (𝓛, 𝓡) 由车道位置决定: P=0 为 (0,1)，P=M-1 为 (1,0)
            lane = step_lane(lane, blockers, rng, t, settings)
            return OmegaCell(lane, COPY, M, P, (K + 1) % M)

    return OmegaCell(lane, mode, M, P, K)


def delta_star(cells: Sequence[OmegaCell], blockers: Blockers, rng: KeyedRNG, t: int,
               settings: DynamicsSettings) -> Tuple[OmegaCell, ...]:
    """全局转移 Δ*: 所有元胞同时读取旧状态"""
    padded = [None] + list(cells) + [None]
    return tuple(
        delta(padded[i - 1], padded[i], padded[i + 1], blockers, rng, t, settings)
        for i in range(1, len(padded) - 1)
    )


def meta_cca_step(road: RoadConfiguration, blockers: Blockers, rng: KeyedRNG, t: int,
                  settings: DynamicsSettings) -> RoadConfiguration:
    """用元自动机模拟一步多车道更新: 包装为 (c_i, copy, M, i, 0)，应用 Δ* 共 2M 次后拆包"""
    M = road.M
    cells = tuple(OmegaCell(lane, COPY, M, i, 0) for i, lane in enumerate(road.lanes))
    for _ in range(2 * M):
        cells = delta_star(cells, blockers, rng, t, settings)
    if any(c.mode != COPY or c.K != 0 for c in cells):
        raise InvariantViolation(f"元自动机 2M 步后未回到初始阶段: {[(c.mode, c.K) for c in cells]}")
    return _check_unique(RoadConfiguration(tuple(c.lane for c in cells)), t)
