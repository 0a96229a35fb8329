import json
import logging
from dataclasses import dataclass, field
from typing import Any, Dict, Iterable, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from config import COMBINER_THRESHOLD
from errors import DomainError

logger = logging.getLogger(__name__)

# 输入变量名与 Perception 字段的对应关系见 lane_dynamics.fuzzy_inputs
INPUT_VARIABLES = ("FD", "NFD", "BD", "PFCT", "WCT", "NFCT", "BCT", "V")
OUTPUT_VARIABLE = "A"
OUTPUT_TERMS = ("NB", "NM", "NS", "Z", "PS", "PM", "PB")

SHAPES = ("triangular", "trapezoidal", "shoulder")

Number = Union[float, np.ndarray]


@dataclass(frozen=True)
class MembershipFunction:
    """分段线性隶属函数

    points 为 (x, μ) 断点，x 严格递增；断点之外取 left / right 饱和值。
    作为规则输出的函数必须是三角形 (唯一峰值，无平台)。
    """

    points: Tuple[Tuple[float, float], ...]
    left: float
    right: float
    shape: str

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise DomainError(f"未知的隶属函数形状: {self.shape}")
        if len(self.points) < 2:
            raise DomainError("隶属函数至少需要两个断点")
        xs = [x for x, _ in self.points]
        if any(b <= a for a, b in zip(xs, xs[1:])):
            raise DomainError(f"断点横坐标必须严格递增: {xs}")
        for mu in [m for _, m in self.points] + [self.left, self.right]:
            if not 0.0 <= mu <= 1.0:
                raise DomainError(f"隶属度必须在 [0,1] 内: {mu}")
        if self.shape == "triangular":
            if len(self.points) != 3 or [m for _, m in self.points] != [0.0, 1.0, 0.0]:
                raise DomainError("三角形隶属函数必须是 (a,0)-(p,1)-(b,0)")

    @classmethod
    def triangular(cls, a: float, peak: float, b: float) -> "MembershipFunction":
        return cls(((float(a), 0.0), (float(peak), 1.0), (float(b), 0.0)), 0.0, 0.0, "triangular")

    @classmethod
    def trapezoidal(cls, a: float, b: float, c: float, d: float,
                    left: Optional[float] = None) -> "MembershipFunction":
        """梯形 (a,b,c,d)；a == b 时左侧为竖直边，饱和值默认为 1"""
        if a == b:
            points = ((float(b), 1.0), (float(c), 1.0), (float(d), 0.0))
            left = 1.0 if left is None else left
        else:
            points = ((float(a), 0.0), (float(b), 1.0), (float(c), 1.0), (float(d), 0.0))
            left = 0.0 if left is None else left
        return cls(points, float(left), 0.0, "trapezoidal")

    @classmethod
    def shoulder(cls, a: float, b: float) -> "MembershipFunction":
        """右肩: a 处为 0，b 处升至 1，之后保持 1"""
        return cls(((float(a), 0.0), (float(b), 1.0)), 0.0, 1.0, "shoulder")

    @property
    def feet(self) -> Tuple[float, float, float]:
        """三角形的 (左脚, 峰值, 右脚)"""
        if self.shape != "triangular":
            raise DomainError("只有三角形隶属函数才有唯一峰值")
        (a, _), (p, _), (b, _) = self.points
        return a, p, b

    def to_dict(self) -> Dict[str, Any]:
        return {
            "shape": self.shape,
            "points": [[x, mu] for x, mu in self.points],
            "left": self.left,
            "right": self.right,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "MembershipFunction":
        points = tuple((float(x), float(mu)) for x, mu in data["points"])
        left = float(data.get("left", points[0][1]))
        right = float(data.get("right", points[-1][1]))
        return cls(points, left, right, data.get("shape", "trapezoidal"))


MembershipTables = Dict[str, Dict[str, MembershipFunction]]


def tables_from_dict(data: Mapping[str, Mapping[str, Any]]) -> MembershipTables:
    """变量 -> 语言项 -> 隶属函数"""
    return {
        variable: {term: MembershipFunction.from_dict(spec) for term, spec in terms.items()}
        for variable, terms in data.items()
    }


def tables_to_dict(tables: MembershipTables) -> Dict[str, Dict[str, Any]]:
    return {
        variable: {term: mf.to_dict() for term, mf in terms.items()}
        for variable, terms in tables.items()
    }


def membership(mf: MembershipFunction, x: Number) -> Number:
    """隶属度: 断点间线性插值，±∞ 取饱和值"""
    xs = [p[0] for p in mf.points]
    mus = [p[1] for p in mf.points]
    value = np.interp(x, xs, mus, left=mf.left, right=mf.right)
    return _as_output(value)


def preimage(mf: MembershipFunction, w: float) -> Tuple[float, ...]:
    """输出三角形在权重 w 处的原像 μ⁻¹(w)

    w = 1 只有峰值；0 < w < 1 为上升沿和下降沿各一点；w = 0 返回空集。
    """
    a, peak, b = mf.feet
    if not 0.0 <= w <= 1.0:
        raise DomainError(f"规则权重必须在 [0,1] 内: {w}")
    if w == 0.0:
        return ()
    if w == 1.0:
        return (peak,)
    points = []
    if peak > a:
        points.append(a + w * (peak - a))
    if b > peak:
        points.append(b - w * (b - peak))
    return tuple(points)


def gwaf(fired: Iterable[Tuple[float, Sequence[float]]]) -> float:
    """广义加权平均去模糊化 ȳ = Σ wʲ Σ_{z∈Pʲ} z / Σ |Pʲ| wʲ

    权重为 0 的规则不参与；没有任何规则触发时返回 0。
    """
    numerator = 0.0
    denominator = 0.0
    for w, points in fired:
        if w <= 0.0:
            continue
        numerator += w * sum(points)
        denominator += w * len(points)
    if denominator <= 0.0:
        return 0.0
    return numerator / denominator


@dataclass(frozen=True)
class Atom:
    """规则前件中的一个原子: 变量 is (not) 语言项"""

    variable: str
    term: str
    negated: bool = False

    def to_list(self) -> list:
        return [self.variable, self.term, "not"] if self.negated else [self.variable, self.term]

    @classmethod
    def from_list(cls, data: Sequence[str]) -> "Atom":
        if len(data) not in (2, 3) or (len(data) == 3 and data[2] != "not"):
            raise DomainError(f"无效的规则原子: {data}")
        return cls(data[0], data[1], len(data) == 3)


@dataclass(frozen=True)
class FuzzyRule:
    """IF 原子1 AND 原子2 ... [AND (合取1 OR 合取2 ...)] THEN A is 输出项"""

    atoms: Tuple[Atom, ...]
    consequent: str
    any_of: Tuple[Tuple[Atom, ...], ...] = ()

    def __post_init__(self):
        if self.consequent not in OUTPUT_TERMS:
            raise DomainError(f"未知的输出语言项: {self.consequent}")
        if not self.atoms and not self.any_of:
            raise DomainError("规则前件不能为空")

    def references(self):
        for atom in self.atoms:
            yield atom
        for conjunction in self.any_of:
            yield from conjunction

    def to_dict(self) -> Dict[str, Any]:
        data: Dict[str, Any] = {"if": [a.to_list() for a in self.atoms], "then": self.consequent}
        if self.any_of:
            data["any"] = [[a.to_list() for a in conj] for conj in self.any_of]
        return data

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "FuzzyRule":
        return cls(
            atoms=tuple(Atom.from_list(a) for a in data.get("if", [])),
            consequent=data["then"],
            any_of=tuple(tuple(Atom.from_list(a) for a in conj) for conj in data.get("any", [])),
        )


@dataclass(frozen=True)
class RuleBase:
    """两个规则模块: 模块 1 (前车/后车) 和模块 2 (前前车)"""

    module1: Tuple[FuzzyRule, ...]
    module2: Tuple[FuzzyRule, ...] = field(default=())

    def validate(self, tables: MembershipTables, owner: str = "") -> None:
        """检查规则引用的 (变量, 语言项) 都存在于隶属函数表中"""
        for rule in self.module1 + self.module2:
            for atom in rule.references():
                if atom.term not in tables.get(atom.variable, {}):
                    raise DomainError(f"{owner} 缺少隶属函数 {atom.variable}/{atom.term}")
            if rule.consequent not in tables.get(OUTPUT_VARIABLE, {}):
                raise DomainError(f"{owner} 缺少输出隶属函数 {rule.consequent}")

    def to_dict(self) -> Dict[str, Any]:
        return {
            "module1": [r.to_dict() for r in self.module1],
            "module2": [r.to_dict() for r in self.module2],
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "RuleBase":
        return cls(
            module1=tuple(FuzzyRule.from_dict(r) for r in data["module1"]),
            module2=tuple(FuzzyRule.from_dict(r) for r in data.get("module2", [])),
        )


def load_rule_base(path: str) -> RuleBase:
    with open(path, "r", encoding="utf-8") as f:
        data = json.load(f)
    rule_base = RuleBase.from_dict(data)
    logger.debug(f"规则库已加载: {path} (模块1 {len(rule_base.module1)} 条, 模块2 {len(rule_base.module2)} 条)")
    return rule_base


def save_rule_base(rule_base: RuleBase, path: str) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(rule_base.to_dict(), f, indent=2, ensure_ascii=False)
        f.write("\n")


def _degree(atom: Atom, inputs: Mapping[str, Number], tables: MembershipTables,
            memo: Dict[Tuple[str, str], Number]) -> Number:
    key = (atom.variable, atom.term)
    if key not in memo:
        if atom.variable not in inputs:
            raise DomainError(f"缺少输入变量: {atom.variable}")
        try:
            mf = tables[atom.variable][atom.term]
        except KeyError:
            raise DomainError(f"没有隶属函数 {atom.variable}/{atom.term}") from None
        memo[key] = membership(mf, inputs[atom.variable])
    mu = memo[key]
    return 1.0 - mu if atom.negated else mu


def _conjunction(atoms: Iterable[Atom], inputs, tables, memo) -> Number:
    weight: Number = 1.0
    for atom in atoms:
        weight = np.minimum(weight, _degree(atom, inputs, tables, memo))
    return weight


def rule_weight(rule: FuzzyRule, inputs: Mapping[str, Number], kind,
                memo: Optional[Dict[Tuple[str, str], Number]] = None) -> Number:
    """规则权重: 原子取 min，否定取 1-μ，OR 块取各合取的 max 后再进入外层 min

    inputs 的值可以是标量或同形状的 numpy 数组 (一条车道上同种车辆的批量计算)。
    """
    memo = {} if memo is None else memo
    tables = kind.memberships
    weight = _conjunction(rule.atoms, inputs, tables, memo)
    if rule.any_of:
        block: Number = 0.0
        for conjunction in rule.any_of:
            block = np.maximum(block, _conjunction(conjunction, inputs, tables, memo))
        weight = np.minimum(weight, block)
    return _as_output(weight)


def _preimage_totals(mf: MembershipFunction, w: Number) -> Tuple[np.ndarray, np.ndarray]:
    """批量计算 Σ_{z∈P} z 和 |P|，与 preimage() 的逐点公式一致"""
    a, peak, b = mf.feet
    w = np.asarray(w, dtype=float)
    has_left = 1.0 if peak > a else 0.0
    has_right = 1.0 if b > peak else 0.0
    left = a + w * (peak - a)
    right = b - w * (b - peak)
    total = np.where(w >= 1.0, peak, left * has_left + right * has_right)
    count = np.where(w >= 1.0, 1.0, has_left + has_right)
    return total, count


def eval_module(module: Sequence[FuzzyRule], inputs: Mapping[str, Number], kind) -> Number:
    """对一个规则模块求值并用 GWAF 去模糊化，返回加速度 (m/s²)"""
    memo: Dict[Tuple[str, str], Number] = {}
    outputs = kind.memberships[OUTPUT_VARIABLE]
    numerator: Number = 0.0
    denominator: Number = 0.0
    for rule in module:
        w = np.asarray(rule_weight(rule, inputs, kind, memo), dtype=float)
        total, count = _preimage_totals(outputs[rule.consequent], w)
        numerator = numerator + w * total
        denominator = denominator + w * count
    denominator = np.asarray(denominator, dtype=float)
    fired = denominator > 0.0
    result = np.where(fired, np.asarray(numerator) / np.where(fired, denominator, 1.0), 0.0)
    return _as_output(result)


def combine_F(a1: Number, a2: Number) -> Number:
    """两个模块输出的组合: a1<=0 取 min；a1>0 且 a2<=-0.25 取平均；否则取 a1"""
    a1 = np.asarray(a1, dtype=float)
    a2 = np.asarray(a2, dtype=float)
    result = np.where(
        a1 <= 0.0,
        np.minimum(a1, a2),
        np.where(a2 <= COMBINER_THRESHOLD, (a1 + a2) / 2.0, a1),
    )
    return _as_output(result)


def _as_output(value) -> Number:
    """0 维结果转回 Python float，数组保持不变"""
    if np.ndim(value) == 0:
        return float(value)
    return value
