class DomainError(ValueError):
    """算子的参数不在定义域内 (空单元、缺少模糊变量、复制前置条件不满足等)"""


class NonPhysicalError(DomainError):
    """插入后的配置不再是物理配置 (位置不严格递增或车身重叠)"""


class InvariantViolation(RuntimeError):
    """内部不变量被破坏 (碰撞、重复车辆编号)，说明实现有缺陷"""


class ConfigError(ValueError):
    """实验或车种配置无效"""
