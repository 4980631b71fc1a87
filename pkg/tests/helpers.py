"""测试用的数值小工具。"""

from typing import Callable, Iterable, List, Optional, Tuple

import numpy as np

from core.model import FactFormerConfig
from core.tensor import FieldTensor


def finite_difference(
    fn: Callable[[], float],
    x: np.ndarray,
    step: float = 1e-5,
    indices: Optional[Iterable[Tuple[int, ...]]] = None,
) -> np.ndarray:
    """
    中心差分。x 被原地扰动后恢复，fn 在每次扰动后重新读取 x。
    indices 为 None 时遍历全部元素，否则只计算给定位置 (其余为 0)。
    """
    grad = np.zeros_like(x)
    positions = list(np.ndindex(*x.shape)) if indices is None else list(indices)
    for idx in positions:
        original = x[idx]
        x[idx] = original + step
        plus = fn()
        x[idx] = original - step
        minus = fn()
        x[idx] = original
        grad[idx] = (plus - minus) / (2.0 * step)
    return grad


def relative_error(actual: np.ndarray, expected: np.ndarray) -> float:
    """max |a − e| / max |e|，分母至少为 1e-8。"""
    scale = max(float(np.max(np.abs(expected))), 1e-8)
    return float(np.max(np.abs(actual - expected))) / scale


def sample_indices(
    shape: Tuple[int, ...], count: int, rng: np.random.Generator
) -> List[Tuple[int, ...]]:
    """从一个形状里抽取 count 个不重复的位置 (不足时全部返回)。"""
    total = int(np.prod(shape))
    flat = rng.choice(total, size=min(count, total), replace=False)
    return [tuple(int(i) for i in np.unravel_index(int(f), shape)) for f in flat]


def tiny_config(**overrides) -> FactFormerConfig:
    """梯度检查与端到端测试用的最小模型配置。"""
    settings = dict(
        grid=(4, 4),
        in_channels=1,
        context_frames=2,
        hidden_dim=8,
        depth=1,
        heads=2,
        kernel_dim=2,
        march_steps=2,
        seed=3,
    )
    settings.update(overrides)
    return FactFormerConfig(**settings)


def random_frames(
    rng: np.random.Generator, config: FactFormerConfig, count: Optional[int] = None
) -> List[FieldTensor]:
    count = config.context_frames if count is None else count
    shape = tuple(config.grid) + (config.in_channels,)
    return [FieldTensor(rng.standard_normal(shape)) for _ in range(count)]
