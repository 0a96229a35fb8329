from typing import Dict, List, Sequence

import numpy as np

from errors import DomainError

# 用途标签 -> Philox 计数器中的编号
PURPOSES: Dict[str, int] = {
    "noise": 1,     # 加速度噪声 (高斯)
    "stress": 2,    # 压力累积中的 X~U(0,1)
    "lcR": 3,       # 向右换道的伯努利试验
    "lcL": 4,       # 向左换道的伯努利试验
    "jam": 5,       # 拥堵判定
    "side": 6,      # 中间车道拥堵时左右选择
    "emit": 7,      # 入口发车
    "kind": 8,      # 发车车种
}
GAUSSIAN_PURPOSES = {"noise"}

_MASK64 = (1 << 64) - 1


class KeyedRNG:
    """计数器型随机源

    每个随机数由 (种子, 重复编号, t, 用途, 编号) 唯一确定:
    Philox 的密钥是 (种子, 重复编号)，计数器高位是 (t, 用途)，
    编号 (车辆 vid 或车道号) 是该流中的下标。
    因此结果与车辆的处理顺序、进程和并行度都无关。
    """

    def __init__(self, seed: int, repetition: int = 0):
        self.seed = int(seed) & _MASK64
        self.repetition = int(repetition) & _MASK64
        self._t = None
        self._streams: Dict[str, List] = {}

    def _values(self, t: int, purpose: str, size: int) -> np.ndarray:
        """取出 (t, purpose) 流的前 size 个数，按需向后扩展"""
        if purpose not in PURPOSES:
            raise DomainError(f"未知的随机数用途: {purpose}")

        # 只缓存当前时间步
        if t != self._t:
            self._streams = {}
            self._t = t

        stream = self._streams.get(purpose)
        if stream is None:
            bitgen = np.random.Philox(
                counter=np.array([0, 0, PURPOSES[purpose], int(t) & _MASK64], dtype=np.uint64),
                key=np.array([self.seed, self.repetition], dtype=np.uint64),
            )
            stream = [np.random.Generator(bitgen), np.empty(0)]
            self._streams[purpose] = stream

        generator, values = stream
        if size > len(values):
            extra = max(size, 2 * len(values), 64) - len(values)
            if purpose in GAUSSIAN_PURPOSES:
                fresh = generator.standard_normal(extra)
            else:
                fresh = generator.random(extra)
            values = np.concatenate([values, fresh])
            stream[1] = values
        return values

    def _draw(self, t: int, index: int, purpose: str) -> float:
        if index < 0:
            raise DomainError(f"随机流下标必须非负: {index}")
        return float(self._values(t, purpose, index + 1)[index])

    def _draws(self, t: int, indices: Sequence[int], purpose: str) -> np.ndarray:
        idx = np.asarray(indices, dtype=np.int64)
        if idx.size == 0:
            return np.empty(0)
        if idx.min() < 0:
            raise DomainError("随机流下标必须非负")
        return self._values(t, purpose, int(idx.max()) + 1)[idx]

    def uniform(self, t: int, index: int, purpose: str) -> float:
        """U[0,1) 取值"""
        return self._draw(t, index, purpose)

    def uniforms(self, t: int, indices: Sequence[int], purpose: str) -> np.ndarray:
        return self._draws(t, indices, purpose)

    def normal(self, t: int, index: int, purpose: str = "noise") -> float:
        """标准正态取值"""
        return self._draw(t, index, purpose)

    def normals(self, t: int, indices: Sequence[int], purpose: str = "noise") -> np.ndarray:
        return self._draws(t, indices, purpose)

    def bernoulli(self, t: int, index: int, purpose: str, p: float) -> bool:
        """伯努利试验: U < p 为成功，p=1 必成功，p=0 必失败"""
        return self._draw(t, index, purpose) < p
