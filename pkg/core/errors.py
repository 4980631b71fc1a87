# core/errors.py

from typing import Optional


class FactFormerError(Exception):
    """所有库内异常的基类。CLI 根据子类决定退出码。"""


class ContractViolationError(FactFormerError, ValueError):
    """形状、维度或前置条件不满足。"""


class ConfigurationError(FactFormerError, ValueError):
    """超参数或运行配置不合法 (例如奇数的 head 宽度)。"""


class DegenerateStatisticsError(FactFormerError, ValueError):
    """归一化统计量无法计算 (例如只有一个空间点)。"""


class DegenerateReferenceError(FactFormerError, ValueError):
    """参考场范数为零，相对误差没有定义。"""


class OracleScaleError(FactFormerError, RuntimeError):
    """暴力求和 oracle 只允许用于小网格。"""


class ResourceBudgetError(FactFormerError, RuntimeError):
    """估算的内存占用超出预算。"""


class NumericalError(FactFormerError, RuntimeError):
    """数值计算失败: 迭代算法未收敛，或中间结果出现 NaN/Inf。"""

    def __init__(self, message: str, residual: Optional[float] = None):
        super().__init__(message)
        self.residual = residual


class TrainingDivergenceError(FactFormerError, RuntimeError):
    """训练过程中出现 NaN/Inf。"""

    def __init__(
        self,
        message: str,
        parameter: Optional[str] = None,
        iteration: Optional[int] = None,
    ):
        super().__init__(message)
        self.parameter = parameter
        self.iteration = iteration


class FormatError(FactFormerError, ValueError):
    """二进制文件 (场文件 / 检查点) 格式错误。"""


class BadMagicError(FormatError):
    pass


class TruncatedFileError(FormatError):
    pass


class ExtentOverflowError(FormatError):
    pass


class VersionMismatchError(FormatError):
    pass
