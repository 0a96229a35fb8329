import bisect
import json
import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Dict, Iterator, Mapping, Optional, Sequence, Tuple

import numpy as np

from config import SERVICE_TIME, TOLERANCE
from errors import ConfigError, DomainError, InvariantViolation, NonPhysicalError
from fuzzy_engine import (
    INPUT_VARIABLES,
    OUTPUT_VARIABLE,
    MembershipTables,
    tables_from_dict,
    tables_to_dict,
)

logger = logging.getLogger(__name__)

INF = float("inf")


class Direction(Enum):
    """换道意愿 d 和转移来源 d′"""
    LEFT = "L"
    NONE = "0"
    RIGHT = "R"

    @property
    def opposite(self) -> "Direction":
        if self is Direction.LEFT:
            return Direction.RIGHT
        if self is Direction.RIGHT:
            return Direction.LEFT
        return Direction.NONE


@dataclass(frozen=True)
class PowerLaw:
    """换道概率函数 P(x) = x^exponent，在 [0,1] 上单调且 P(0)=0, P(1)=1"""

    exponent: float = 1.0

    def __post_init__(self):
        if not self.exponent > 0:
            raise ConfigError(f"换道概率函数的指数必须为正: {self.exponent}")

    def __call__(self, x):
        clipped = np.clip(x, 0.0, 1.0)
        value = np.power(clipped, self.exponent)
        if np.ndim(value) == 0:
            return float(value)
        return value


@dataclass(frozen=True, eq=False)
class Kind:
    """车辆种类: 动力学参数、压力上下限、换道概率函数和隶属函数表

    按身份比较 (eq=False)，同一次运行中所有车辆共享同一个 Kind 对象。
    """

    id: str
    v_max: float
    v_opt: float
    length: float
    accel_noise: float
    s_max: float
    s_min: float
    p_left: PowerLaw = field(default_factory=PowerLaw)
    p_right: PowerLaw = field(default_factory=PowerLaw)
    memberships: MembershipTables = field(default_factory=dict)
    service_time: float = SERVICE_TIME
    is_obstacle: bool = False

    def __post_init__(self):
        if not self.length > 0:
            raise ConfigError(f"车种 {self.id} 的车长必须为正: {self.length}")
        if self.is_obstacle:
            return
        if not 0 < self.v_opt <= self.v_max:
            raise ConfigError(f"车种 {self.id} 需要 0 < v_opt <= v_max: {self.v_opt}, {self.v_max}")
        if not self.s_min < 0 < self.s_max:
            raise ConfigError(f"车种 {self.id} 需要 s_min < 0 < s_max: {self.s_min}, {self.s_max}")
        if self.accel_noise < 0:
            raise ConfigError(f"车种 {self.id} 的加速度噪声不能为负: {self.accel_noise}")
        if self.service_time < 0:
            raise ConfigError(f"车种 {self.id} 的服务时间不能为负: {self.service_time}")
        missing = [v for v in INPUT_VARIABLES + (OUTPUT_VARIABLE,) if v not in self.memberships]
        if missing:
            raise ConfigError(f"车种 {self.id} 缺少隶属函数变量: {missing}")
        for term, mf in self.memberships[OUTPUT_VARIABLE].items():
            if mf.shape != "triangular":
                raise ConfigError(f"车种 {self.id} 的输出项 {term} 必须是无平台的三角形")

    def to_dict(self) -> Dict[str, Any]:
        return {
            "id": self.id,
            "v_max": self.v_max,
            "v_opt": self.v_opt,
            "length": self.length,
            "accel_noise": self.accel_noise,
            "s_max": self.s_max,
            "s_min": self.s_min,
            "p_left": {"power": self.p_left.exponent},
            "p_right": {"power": self.p_right.exponent},
            "service_time": self.service_time,
            "memberships": tables_to_dict(self.memberships),
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "Kind":
        try:
            return cls(
                id=str(data["id"]),
                v_max=float(data["v_max"]),
                v_opt=float(data["v_opt"]),
                length=float(data["length"]),
                accel_noise=float(data["accel_noise"]),
                s_max=float(data["s_max"]),
                s_min=float(data["s_min"]),
                p_left=PowerLaw(float(data.get("p_left", {}).get("power", 1.0))),
                p_right=PowerLaw(float(data.get("p_right", {}).get("power", 1.0))),
                memberships=tables_from_dict(data.get("memberships", {})),
                service_time=float(data.get("service_time", SERVICE_TIME)),
            )
        except KeyError as e:
            raise ConfigError(f"车种配置缺少字段: {e}") from None
        except DomainError as e:
            raise ConfigError(f"车种 {data.get('id')} 的隶属函数无效: {e}") from None


def obstacle_kind(length: float) -> Kind:
    """障碍物: 速度恒为 0，不参与更新和换道"""
    return Kind(
        id="obstacle", v_max=0.0, v_opt=0.0, length=length, accel_noise=0.0,
        s_max=0.0, s_min=0.0, is_obstacle=True,
    )


def load_kinds(path: str) -> Dict[str, Kind]:
    """读取车种文件，返回 id -> Kind"""
    with open(path, "r", encoding="utf-8") as f:
        data = json.load(f)
    kinds = {}
    for entry in data.get("kinds", []):
        kind = Kind.from_dict(entry)
        if kind.id in kinds:
            raise ConfigError(f"车种编号重复: {kind.id}")
        kinds[kind.id] = kind
    logger.debug(f"车种已加载: {path} -> {list(kinds)}")
    return kinds


def save_kinds(kinds: Mapping[str, Kind], path: str) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump({"kinds": [k.to_dict() for k in kinds.values()]}, f, indent=2, ensure_ascii=False)
        f.write("\n")


@dataclass(frozen=True)
class VehicleState:
    """一个被占据的元胞: (k, x, v, s, d, d′) 加上车辆编号和进入时间"""

    kind: Kind
    x: float
    v: float
    s: float = 0.0
    d: Direction = Direction.NONE
    d_prime: Direction = Direction.NONE
    vid: int = 0
    entry_time: float = 0.0

    @property
    def front(self) -> float:
        return self.x + self.kind.length / 2.0

    @property
    def rear(self) -> float:
        return self.x - self.kind.length / 2.0

    def evolve(self, **changes) -> "VehicleState":
        return replace(self, **changes)


@dataclass(frozen=True)
class LaneConfiguration:
    """一条车道上的有限物理配置，按位置严格递增排列

    left_exists / right_exists 是该车道左右是否还有车道 (𝓛, 𝓡)。
    """

    cells: Tuple[VehicleState, ...] = ()
    left_exists: bool = False
    right_exists: bool = False

    def __len__(self) -> int:
        return len(self.cells)

    def __iter__(self) -> Iterator[VehicleState]:
        return iter(self.cells)

    def __getitem__(self, i: int) -> VehicleState:
        return self.cells[i]

    def with_cells(self, cells: Sequence[VehicleState]) -> "LaneConfiguration":
        return LaneConfiguration(tuple(cells), self.left_exists, self.right_exists)

    @property
    def positions(self) -> np.ndarray:
        return np.array([c.x for c in self.cells], dtype=float)


@dataclass(frozen=True)
class Blockers:
    """虚拟前车覆盖层 (收费站停止线)

    stop_line 为 None 表示开放道路；否则车头在停止线前 radius 米内的车辆
    会感知到一辆位于 stop_line、长度为 0 的静止虚拟车，
    并且任何车辆的速度都不能让车头越过停止线。
    """

    stop_line: Optional[float] = None
    radius: float = 0.0

    @classmethod
    def open_road(cls) -> "Blockers":
        return cls()

    def perceived(self, front: np.ndarray) -> np.ndarray:
        if self.stop_line is None:
            return np.zeros(np.shape(front), dtype=bool)
        ahead = self.stop_line - front
        return (ahead >= 0.0) & (ahead <= self.radius)

    def barrier(self, front: np.ndarray) -> np.ndarray:
        if self.stop_line is None:
            return np.full(np.shape(front), INF)
        return np.maximum(0.0, self.stop_line - front)


@dataclass(frozen=True)
class Perception:
    """单个车辆的感知量，距离单位米，时间单位秒，可为 ±∞"""

    bd: float
    fd: float
    nfd: float
    fct: float
    pfct: float
    wfct: float
    nfct: float
    bct: float
    zeta: float


@dataclass(frozen=True)
class LanePerception:
    """整条车道的感知量数组，下标与 cells 一致

    v_front / v_next_front 是 FD / NFD 所对应的那辆车 (可能是虚拟车) 的速度，
    barrier 是停止线允许的最大位移。
    """

    bd: np.ndarray
    fd: np.ndarray
    nfd: np.ndarray
    fct: np.ndarray
    pfct: np.ndarray
    wfct: np.ndarray
    nfct: np.ndarray
    bct: np.ndarray
    zeta: np.ndarray
    v_front: np.ndarray
    barrier: np.ndarray

    def at(self, i: int) -> Perception:
        return Perception(
            bd=float(self.bd[i]), fd=float(self.fd[i]), nfd=float(self.nfd[i]),
            fct=float(self.fct[i]), pfct=float(self.pfct[i]), wfct=float(self.wfct[i]),
            nfct=float(self.nfct[i]), bct=float(self.bct[i]), zeta=float(self.zeta[i]),
        )


def _closing_time(gap: np.ndarray, v_behind: np.ndarray, v_ahead: np.ndarray) -> np.ndarray:
    """gap / (v_behind - v_ahead)；没有邻车或速度相等时为 +∞"""
    dv = v_behind - v_ahead
    defined = np.isfinite(gap) & (dv != 0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(defined, gap / np.where(defined, dv, 1.0), INF)


def perceive_lane(c: LaneConfiguration, blockers: Optional[Blockers] = None) -> LanePerception:
    """按时间 t 的快照计算整条车道所有车辆的感知量"""
    blockers = blockers or Blockers.open_road()
    n = len(c)
    x = np.array([cell.x for cell in c.cells], dtype=float)
    v = np.array([cell.v for cell in c.cells], dtype=float)
    half = np.array([cell.kind.length / 2.0 for cell in c.cells], dtype=float)
    s = np.array([cell.s for cell in c.cells], dtype=float)
    s_max = np.array([cell.kind.s_max for cell in c.cells], dtype=float)
    front = x + half
    rear = x - half

    # 前方候选: 真实的 i+1、i+2 和停止线虚拟车，按到其车尾的距离排序取前两个
    gaps = np.full((3, n), INF)
    speeds = np.zeros((3, n))
    if n > 1:
        gaps[0, :-1] = rear[1:] - front[:-1]
        speeds[0, :-1] = v[1:]
    if n > 2:
        gaps[1, :-2] = rear[2:] - front[:-2]
        speeds[1, :-2] = v[2:]
    seen = blockers.perceived(front)
    if blockers.stop_line is not None:
        gaps[2] = np.where(seen, blockers.stop_line - front, INF)
    order = np.argsort(gaps, axis=0, kind="stable")
    columns = np.arange(n)
    fd = gaps[order[0], columns]
    v_front = speeds[order[0], columns]
    nfd = gaps[order[1], columns]
    v_next_front = speeds[order[1], columns]

    bd = np.full(n, INF)
    v_back = np.zeros(n)
    if n > 1:
        bd[1:] = rear[1:] - front[:-1]
        v_back[1:] = v[:-1]

    fct = _closing_time(fd, v, v_front)
    nfct = _closing_time(nfd, v, v_next_front)
    bct = _closing_time(bd, v_back, v)

    moving = v > 0.0
    with np.errstate(divide="ignore", invalid="ignore"):
        zeta = np.where(moving, (s_max - s) / np.where(moving, v, 1.0), INF)
        wfct = np.where(moving & np.isfinite(fd), fd / np.where(moving, v, 1.0), INF)
    pfct = np.where(fct < 0.0, zeta, np.minimum(zeta, fct))

    return LanePerception(
        bd=bd, fd=fd, nfd=nfd, fct=fct, pfct=pfct, wfct=wfct, nfct=nfct, bct=bct,
        zeta=zeta, v_front=v_front, barrier=blockers.barrier(front),
    )


def compute_perception(c: LaneConfiguration, i: int, blockers: Optional[Blockers] = None) -> Perception:
    """车道 c 中第 i 辆车的感知量"""
    if not 0 <= i < len(c):
        raise DomainError(f"元胞 {i} 没有车辆 (车道共 {len(c)} 辆)")
    return perceive_lane(c, blockers).at(i)


def gap_between(back: VehicleState, ahead: VehicleState) -> float:
    return ahead.rear - back.front


def index_of(sigma: VehicleState, c: LaneConfiguration) -> int:
    """插入 σ 后位置仍严格递增的下标 (第一个 x_j > σ.x 的 j)"""
    xs = [cell.x for cell in c.cells]
    j = bisect.bisect_left(xs, sigma.x)
    if j < len(xs) and xs[j] == sigma.x:
        raise NonPhysicalError(f"位置 {sigma.x} 已被车辆 {c[j].vid} 占据")
    return j


def insert_at(n: int, sigma: VehicleState, c: LaneConfiguration) -> LaneConfiguration:
    """在下标 n 处插入 σ，其后的车辆顺移一位"""
    if not 0 <= n <= len(c):
        raise DomainError(f"插入下标越界: {n} (车道共 {len(c)} 辆)")
    if n > 0:
        back = c[n - 1]
        if not back.x < sigma.x or gap_between(back, sigma) < -TOLERANCE:
            raise NonPhysicalError(f"车辆 {sigma.vid} 与后车 {back.vid} 重叠")
    if n < len(c):
        ahead = c[n]
        if not sigma.x < ahead.x or gap_between(sigma, ahead) < -TOLERANCE:
            raise NonPhysicalError(f"车辆 {sigma.vid} 与前车 {ahead.vid} 重叠")
    return c.with_cells(c.cells[:n] + (sigma,) + c.cells[n:])


def delete_at(n: int, c: LaneConfiguration) -> LaneConfiguration:
    """删除下标 n 处的车辆，其后的车辆前移一位"""
    if not 0 <= n < len(c):
        raise DomainError(f"元胞 {n} 没有车辆 (车道共 {len(c)} 辆)")
    return c.with_cells(c.cells[:n] + c.cells[n + 1:])


def physical_violations(c: LaneConfiguration) -> list:
    """返回违反物理性的相邻车辆对 (后车 vid, 前车 vid, 间距)"""
    violations = []
    for back, ahead in zip(c.cells, c.cells[1:]):
        gap = gap_between(back, ahead)
        if not back.x < ahead.x or gap < -TOLERANCE:
            violations.append((back.vid, ahead.vid, gap))
    return violations


def is_physical(c: LaneConfiguration) -> bool:
    return not physical_violations(c)


def assert_physical(c: LaneConfiguration, context: str = "") -> None:
    violations = physical_violations(c)
    if violations:
        logger.error(f"❌ 碰撞检测失败 {context}: {violations[:5]}")
        raise InvariantViolation(f"车道配置不再是物理配置 {context}: {violations[:5]}")
