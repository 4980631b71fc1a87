# core/tensor.py

import logging
from typing import Sequence, Tuple, Union

import numpy as np

from utils.counters import op_counter
from .errors import ContractViolationError, DegenerateReferenceError, NumericalError

logger = logging.getLogger(__name__)

MAX_SPATIAL_DIMS = 3


class FieldTensor:
    """
    离散化的场 u: 形状 [S_1, ..., S_n, d] 的稠密张量，最后一维是通道。

    - 计算精度固定为 float64，行主序，通道维变化最快。
    - 构造后不可修改 (底层数组被设为只读)。
    - 来自外部的数据请使用 `from_external`，它会拒绝 NaN/Inf。
    """

    __slots__ = ("_data",)

    def __init__(self, data: np.ndarray):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim < 2 or arr.ndim > MAX_SPATIAL_DIMS + 1:
            raise ContractViolationError(
                f"FieldTensor needs 1-{MAX_SPATIAL_DIMS} spatial modes plus a channel mode, "
                f"got shape {arr.shape}."
            )
        if any(extent < 1 for extent in arr.shape):
            raise ContractViolationError(
                f"All FieldTensor extents must be >= 1, got shape {arr.shape}."
            )
        view = arr.view()
        view.flags.writeable = False
        self._data = view

    @classmethod
    def from_external(cls, data: np.ndarray) -> "FieldTensor":
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise ContractViolationError(
                "External data contains NaN or Inf values and was rejected."
            )
        return cls(arr)

    @classmethod
    def zeros(cls, spatial_shape: Sequence[int], channels: int) -> "FieldTensor":
        return cls(np.zeros(tuple(spatial_shape) + (channels,)))

    @property
    def data(self) -> np.ndarray:
        return self._data

    @property
    def shape(self) -> Tuple[int, ...]:
        return self._data.shape

    @property
    def spatial_shape(self) -> Tuple[int, ...]:
        return self._data.shape[:-1]

    @property
    def n_spatial(self) -> int:
        return self._data.ndim - 1

    @property
    def channels(self) -> int:
        return self._data.shape[-1]

    @property
    def num_points(self) -> int:
        return int(np.prod(self.spatial_shape))

    @property
    def channel_axis(self) -> int:
        return self._data.ndim - 1

    def as_points(self) -> np.ndarray:
        """返回 (N, d) 视图，N 为空间点数。"""
        return self._data.reshape(self.num_points, self.channels)

    def __repr__(self) -> str:
        return f"FieldTensor(shape={self.shape})"


class Matrix:
    """不可变的二维 float64 矩阵。元素出现 NaN/Inf 时报 NumericalError。"""

    __slots__ = ("_data",)

    def __init__(self, data: np.ndarray):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ContractViolationError(
                f"Matrix needs two positive extents, got shape {arr.shape}."
            )
        if not np.all(np.isfinite(arr)):
            raise NumericalError(f"Matrix of shape {arr.shape} has non-finite entries.")
        view = arr.view()
        view.flags.writeable = False
        self._data = view

    @classmethod
    def identity(cls, size: int) -> "Matrix":
        return cls(np.eye(size))

    @property
    def data(self) -> np.ndarray:
        return self._data

    @property
    def rows(self) -> int:
        return self._data.shape[0]

    @property
    def cols(self) -> int:
        return self._data.shape[1]

    @property
    def shape(self) -> Tuple[int, int]:
        return self._data.shape  # type: ignore[return-value]

    def __repr__(self) -> str:
        return f"Matrix({self.rows}x{self.cols})"


ArrayOrMatrix = Union[Matrix, np.ndarray]


def _raw(m: ArrayOrMatrix) -> np.ndarray:
    if isinstance(m, Matrix):
        return m.data
    arr = np.asarray(m, dtype=np.float64)
    if arr.ndim != 2:
        raise ContractViolationError(f"Expected a 2-d matrix, got shape {arr.shape}.")
    return arr


def mode_product_array(
    arr: np.ndarray, w: np.ndarray, axis: int, category: str = "mode_product"
) -> np.ndarray:
    """
    张量-矩阵 mode 积的数组版本: out[.., i, ..] = sum_j w[i, j] * arr[.., j, ..]。

    不做通道维检查，供注意力模块内部直接调用；乘加次数计入 `category`。
    """
    if w.ndim != 2 or w.shape[1] != arr.shape[axis]:
        raise ContractViolationError(
            f"Mode product along mode {axis}: matrix has {w.shape[-1]} columns "
            f"but the tensor extent is {arr.shape[axis]}."
        )
    out = np.moveaxis(np.tensordot(w, arr, axes=([1], [axis])), 0, axis)
    op_counter.add(category, out.size * w.shape[1])
    return np.ascontiguousarray(out)


def mode_product(
    t: FieldTensor, w: ArrayOrMatrix, axis: int, channel: bool = False
) -> FieldTensor:
    """
    mode-m 积 t ×_m W，W 的形状为 (J, S_m)。

    `axis` 从 0 开始计数。只有在 `channel=True` 时才允许作用在通道维上
    (用于 V = U ×_{n+1} W_v)。
    """
    w_arr = _raw(w)
    if not 0 <= axis < t.data.ndim:
        raise ContractViolationError(
            f"Mode {axis} is out of range for a tensor with {t.data.ndim} modes."
        )
    if axis == t.channel_axis and not channel:
        raise ContractViolationError(
            f"Mode {axis} is the channel mode; pass channel=True to contract it."
        )
    if w_arr.ndim != 2 or w_arr.shape[1] != t.shape[axis]:
        raise ContractViolationError(
            f"Mode product along mode {axis}: matrix has {w_arr.shape[-1]} columns "
            f"but the tensor extent is {t.shape[axis]}."
        )
    return FieldTensor(mode_product_array(t.data, w_arr, axis))


def mean_over_axes(t: FieldTensor, keep: int) -> Matrix:
    """
    对除第 keep 个空间维以外的所有空间维取平均，返回 (S_keep, d) 矩阵。
    相当于单位长度坐标轴上的均匀求积。
    """
    if not 0 <= keep < t.n_spatial:
        raise ContractViolationError(
            f"mean_over_axes keeps a spatial mode, got {keep} "
            f"(tensor has {t.n_spatial} spatial modes)."
        )
    pooled = t.data.mean(axis=pooled_axes(t.n_spatial, keep))
    return Matrix(pooled.reshape(t.shape[keep], t.channels))


def pooled_axes(n_spatial: int, keep: int) -> Tuple[int, ...]:
    return tuple(ax for ax in range(n_spatial) if ax != keep)


def relative_l2(pred: FieldTensor, ref: FieldTensor) -> float:
    """‖pred − ref‖₂ / ‖ref‖₂，对全部元素计算。"""
    value, _ = relative_l2_with_grad(pred, ref)
    return value


def relative_l2_with_grad(
    pred: FieldTensor, ref: FieldTensor
) -> Tuple[float, np.ndarray]:
    """
    返回相对 L² 误差以及它对 pred 的梯度。
    pred 与 ref 完全相同时梯度约定为 0。
    """
    if pred.shape != ref.shape:
        raise ContractViolationError(
            f"relative_l2 needs identical shapes, got {pred.shape} and {ref.shape}."
        )
    ref_norm = float(np.linalg.norm(ref.data))
    if ref_norm == 0.0:
        raise DegenerateReferenceError("Reference field has zero L2 norm.")
    diff = pred.data - ref.data
    diff_norm = float(np.linalg.norm(diff))
    if diff_norm == 0.0:
        return 0.0, np.zeros_like(diff)
    return diff_norm / ref_norm, diff / (diff_norm * ref_norm)


def matmul(a: ArrayOrMatrix, b: ArrayOrMatrix) -> Matrix:
    a_arr, b_arr = _raw(a), _raw(b)
    if a_arr.shape[1] != b_arr.shape[0]:
        raise ContractViolationError(
            f"matmul inner extents differ: {a_arr.shape} x {b_arr.shape}."
        )
    return Matrix(a_arr @ b_arr)


def transpose(a: ArrayOrMatrix) -> Matrix:
    return Matrix(np.ascontiguousarray(_raw(a).T))


def axis_coordinates(extent: int) -> np.ndarray:
    """单位长度坐标轴上的网格坐标 i / S，i = 0..S-1。"""
    return np.arange(extent, dtype=np.float64) / extent


def grid_points(spatial_shape: Sequence[int]) -> np.ndarray:
    """返回形状 (S_1, ..., S_n, n) 的网格坐标。"""
    axes = [axis_coordinates(s) for s in spatial_shape]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack(mesh, axis=-1)
