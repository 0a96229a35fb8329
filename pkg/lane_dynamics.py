import logging
from dataclasses import dataclass
from typing import Dict, List, Optional

import numpy as np

from config import LEFT_PREFERENCE
from errors import DomainError
from fuzzy_engine import RuleBase, combine_F, eval_module, membership
from random_streams import KeyedRNG
from vehicle_model import (
    Blockers,
    Direction,
    Kind,
    LaneConfiguration,
    LanePerception,
    Perception,
    assert_physical,
    perceive_lane,
)

logger = logging.getLogger(__name__)

# 方向的整数编码，便于批量计算
_NONE, _LEFT, _RIGHT = 0, 1, 2
_DIRECTIONS = (Direction.NONE, Direction.LEFT, Direction.RIGHT)


@dataclass(frozen=True)
class DynamicsSettings:
    """单车道演化的可调项

    accel_override 不为 None 时用常数加速度替代模糊决策 (7.5 即确定性 NaSch)。
    desire_from_updated_stress 决定换道意愿用 s(t+1) 还是 s(t)。
    """

    rule_base: RuleBase
    noise_enabled: bool = True
    accel_override: Optional[float] = None
    desire_from_updated_stress: bool = True


def fuzzy_inputs(perception, v) -> Dict[str, object]:
    """感知量 -> 模糊输入变量；WCT 取最坏情况碰撞时间 WFCT"""
    return {
        "FD": perception.fd,
        "NFD": perception.nfd,
        "BD": perception.bd,
        "PFCT": perception.pfct,
        "WCT": perception.wfct,
        "NFCT": perception.nfct,
        "BCT": perception.bct,
        "V": v,
    }


def _group_by_kind(c: LaneConfiguration) -> Dict[Kind, np.ndarray]:
    """可移动车辆按车种分组 (障碍物不参与)"""
    groups: Dict[Kind, List[int]] = {}
    for i, cell in enumerate(c.cells):
        if not cell.kind.is_obstacle:
            groups.setdefault(cell.kind, []).append(i)
    return {kind: np.array(idx, dtype=np.int64) for kind, idx in groups.items()}


def _subset(perception: LanePerception, idx: np.ndarray) -> Perception:
    return Perception(
        bd=perception.bd[idx], fd=perception.fd[idx], nfd=perception.nfd[idx],
        fct=perception.fct[idx], pfct=perception.pfct[idx], wfct=perception.wfct[idx],
        nfct=perception.nfct[idx], bct=perception.bct[idx], zeta=perception.zeta[idx],
    )


def _kind_accelerations(kind: Kind, perception: Perception, v: np.ndarray, vids: np.ndarray,
                        rng: KeyedRNG, t: int, settings: DynamicsSettings) -> np.ndarray:
    if settings.accel_override is not None:
        a = np.full(len(v), float(settings.accel_override))
    else:
        inputs = fuzzy_inputs(perception, v)
        a1 = eval_module(settings.rule_base.module1, inputs, kind)
        a2 = eval_module(settings.rule_base.module2, inputs, kind)
        a = np.asarray(combine_F(a1, a2), dtype=float)
    if settings.noise_enabled and kind.accel_noise > 0.0:
        a = a + kind.accel_noise * rng.normals(t, vids, "noise")
    return a


def acceleration(c: LaneConfiguration, i: int, blockers: Blockers, rng: KeyedRNG, t: int,
                 settings: DynamicsSettings) -> float:
    """第 i 辆车的加速度 A = F(模块1, 模块2) + η"""
    if not 0 <= i < len(c):
        raise DomainError(f"元胞 {i} 没有车辆 (车道共 {len(c)} 辆)")
    cell = c[i]
    if cell.kind.is_obstacle:
        return 0.0
    perception = perceive_lane(c, blockers)
    idx = np.array([i])
    a = _kind_accelerations(cell.kind, _subset(perception, idx), np.array([cell.v]),
                            np.array([cell.vid]), rng, t, settings)
    return float(a[0])


def update_velocity(v, v_max, fd, a):
    """v(t+1) = min(v_max, FD, max(0, v + A))；FD = +∞ 时该约束失效"""
    # FD 或 barrier 的浮点误差可能略小于 0，上界先截到 0
    upper = np.maximum(0.0, np.minimum(v_max, fd))
    result = np.minimum(upper, np.maximum(0.0, np.add(v, a)))
    if np.ndim(result) == 0:
        return float(result)
    return result


def update_position(x, v_next):
    """x(t+1) = x(t) + v(t+1)"""
    return x + v_next


def phi(fct, fd, kind: Kind):
    """前车很近的程度 Φ: (τ⁺ VS∧FD M) ∨ (τ⁺ VS∧FD S) ∨ (τ⁺ S∧FD M) ∨ (τ⁺ S∧FD S)"""
    time_terms = kind.memberships["PFCT"]
    distance_terms = kind.memberships["FD"]
    t_vs = membership(time_terms["VS"], fct)
    t_s = membership(time_terms["S"], fct)
    d_m = membership(distance_terms["M"], fd)
    d_s = membership(distance_terms["S"], fd)
    result = np.maximum(
        np.maximum(np.minimum(t_vs, d_m), np.minimum(t_vs, d_s)),
        np.maximum(np.minimum(t_s, d_m), np.minimum(t_s, d_s)),
    )
    if np.ndim(result) == 0:
        return float(result)
    return result


def accumulate_stress(s, v_next, v_opt, x):
    """s_acc = s + (v(t+1) - v_opt)·X"""
    return s + (v_next - v_opt) * x


def stress_transition(s_acc, fct, phi_value, s_min: float, s_max: float):
    """压力更新: 在 (s_min/2, 0) 窗口内，τ⁺<0 时减半，τ⁺>=0 时乘 (1+Φ)；最后截断到 [s_min, s_max]"""
    s_acc = np.asarray(s_acc, dtype=float)
    window = (s_min / 2.0 < s_acc) & (s_acc < 0.0)
    fct = np.asarray(fct, dtype=float)
    result = np.where(
        window & (fct < 0.0),
        s_acc / 2.0,
        np.where(window, s_acc * (1.0 + np.asarray(phi_value, dtype=float)), s_acc),
    )
    result = np.clip(result, s_min, s_max)
    if np.ndim(result) == 0:
        return float(result)
    return result


def update_stress(s: float, v_next: float, kind: Kind, fct: float, phi_value: float,
                  rng: KeyedRNG, t: int, vid: int) -> float:
    """一辆车的压力更新，X~U(0,1) 取自 (t, vid, "stress") 流"""
    x = rng.uniform(t, vid, "stress")
    s_acc = accumulate_stress(s, v_next, kind.v_opt, x)
    return stress_transition(s_acc, fct, phi_value, kind.s_min, kind.s_max)


def _kind_desires(kind: Kind, v: np.ndarray, s: np.ndarray, vids: np.ndarray,
                  left_exists: bool, right_exists: bool, rng: KeyedRNG, t: int) -> np.ndarray:
    """换道意愿的批量计算，返回方向编码数组

    s >= 0 用 P_R(s/s_max) 决定是否向右；s < 0 用 P_L(s/s_min) 决定是否换道，
    再以 μ_vels(v) 判定是否处于拥堵: 拥堵时边缘车道只能去唯一的一侧，
    中间车道以 0.7 的概率向左；非拥堵时向左 (超车)。
    """
    relaxed = s >= 0.0
    wants_right = relaxed & (rng.uniforms(t, vids, "lcR") < kind.p_right(np.where(relaxed, s / kind.s_max, 0.0)))
    wants_change = ~relaxed & (rng.uniforms(t, vids, "lcL") < kind.p_left(np.where(relaxed, 0.0, s / kind.s_min)))

    jam = rng.uniforms(t, vids, "jam") < membership(kind.memberships["V"]["S"], v)
    if left_exists and right_exists:
        jam_side = np.where(rng.uniforms(t, vids, "side") < LEFT_PREFERENCE, _LEFT, _RIGHT)
    elif right_exists:
        jam_side = np.full(len(v), _RIGHT)
    elif left_exists:
        jam_side = np.full(len(v), _LEFT)
    else:
        jam_side = np.full(len(v), _NONE)

    return np.where(
        wants_right, _RIGHT,
        np.where(wants_change, np.where(jam, jam_side, _LEFT), _NONE),
    )


def eval_lane_desire(kind: Kind, v: float, s: float, left_exists: bool, right_exists: bool,
                     rng: KeyedRNG, t: int, vid: int) -> Direction:
    """单辆车的换道意愿 d ∈ {L, 0, R}"""
    code = _kind_desires(kind, np.array([float(v)]), np.array([float(s)]), np.array([vid]),
                         left_exists, right_exists, rng, t)
    return _DIRECTIONS[int(code[0])]


def step_lane(c: LaneConfiguration, blockers: Blockers, rng: KeyedRNG, t: int,
              settings: DynamicsSettings) -> LaneConfiguration:
    """全局映射 δ*: 同步更新整条车道

    所有量都只读时间 t 的快照，随机数按 vid 取值，因此处理顺序不影响结果。
    """
    if not len(c):
        return c
    perception = perceive_lane(c, blockers)
    cells = list(c.cells)

    for kind, idx in _group_by_kind(c).items():
        v = np.array([cells[i].v for i in idx], dtype=float)
        x = np.array([cells[i].x for i in idx], dtype=float)
        s = np.array([cells[i].s for i in idx], dtype=float)
        vids = np.array([cells[i].vid for i in idx], dtype=np.int64)
        view = _subset(perception, idx)

        a = _kind_accelerations(kind, view, v, vids, rng, t, settings)
        v_next = update_velocity(v, kind.v_max, np.minimum(view.fd, perception.barrier[idx]), a)
        x_next = update_position(x, v_next)

        x_draw = rng.uniforms(t, vids, "stress")
        s_acc = accumulate_stress(s, v_next, kind.v_opt, x_draw)
        s_next = stress_transition(s_acc, view.fct, phi(view.fct, view.fd, kind), kind.s_min, kind.s_max)
        s_next = np.atleast_1d(s_next)

        desire_stress = s_next if settings.desire_from_updated_stress else s
        desires = _kind_desires(kind, v, desire_stress, vids, c.left_exists, c.right_exists, rng, t)

        for k, i in enumerate(idx):
            cells[i] = cells[i].evolve(
                x=float(x_next[k]),
                v=float(v_next[k]),
                s=float(s_next[k]),
                d=_DIRECTIONS[int(desires[k])],
                d_prime=Direction.NONE,
            )

    result = c.with_cells(cells)
    assert_physical(result, context=f"t={t}")
    return result
